"""Sampling study relating the condition number and the determinant of U.

Random snippet-level joints ``U = P1 @ Y1`` are drawn, and for each one we
record ``log eta(U)`` (the pDMI value) and ``log |det U|`` (the quantity the
original DMI loss maximizes). A strongly negative correlation means that
driving the condition number down also drives the determinant up.
"""
from __future__ import annotations

import csv

import numpy as np

from . import ndiff as nd
from .errors import ConfigError
from .losses import snippet_joint


def sample_joint(rng, max_snippets=40):
    """One random valid 2x2 joint built exactly like the training loss does."""
    z = int(rng.integers(2, max_snippets + 1))
    n_f = int(rng.integers(1, z))
    lam_prime = np.concatenate([np.full(n_f, 0.75), np.full(z - n_f, 0.25)])
    lam = nd.constant(rng.uniform(0.0, 1.0, (z, 1)))
    j = snippet_joint(lam, lam_prime)
    return j.P.values @ j.Y.values


def study_rows(num_samples, seed=0, plant_identity=True):
    """``(log_eta, log_abs_det, planted)`` per sample.

    With ``plant_identity`` the first row is the optimum ``U = I`` itself.
    Samples whose determinant is exactly zero are redrawn.
    """
    if num_samples < 1:
        raise ConfigError("num_samples must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    if plant_identity:
        U = np.eye(2)
        rows.append((nd.log_condition_number(nd.constant(U)).item(), float(np.log(nd.abs_det(U))), 1))
    while len(rows) < num_samples:
        U = sample_joint(rng)
        det = nd.abs_det(U)
        if det <= 0.0:
            continue
        rows.append((nd.log_condition_number(nd.constant(U)).item(), float(np.log(det)), 0))
    return rows


def pearson(rows):
    a = np.array([(r[0], r[1]) for r in rows])
    return float(np.corrcoef(a[:, 0], a[:, 1])[0, 1])


def write_study(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log_eta", "log_abs_det", "planted"])
        for le, ld, planted in rows:
            w.writerow([repr(le), repr(ld), planted])
