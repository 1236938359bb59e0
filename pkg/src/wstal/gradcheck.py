"""Central finite-difference checks for every differentiable piece.

Relative error at a coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = 1e-6`` so that coordinates whose true gradient is ~0 are compared
absolutely.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import losses
from . import ndiff as nd
from .losses import LossConfig
from .model import ModelConfig, forward, init_params

STEP = 1e-5
FLOOR = 1e-6
TOLERANCE = 1e-4


def relative_error(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f, param, coords=None, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. ``param.values`` entries."""
    out = np.zeros_like(param.values)
    if coords is None:
        coords = list(np.ndindex(param.values.shape))
    for idx in coords:
        old = param.values[idx]
        param.values[idx] = old + h
        fp = f().item()
        param.values[idx] = old - h
        fm = f().item()
        param.values[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


@contextlib.contextmanager
def override_rule(op, rule):
    """Temporarily replace the backward rule of ``op`` (negative controls)."""
    saved = nd.BACKWARD_RULES[op]
    nd.BACKWARD_RULES[op] = rule
    try:
        yield
    finally:
        nd.BACKWARD_RULES[op] = saved


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    coordinates: int
    passed: bool


def check_scalar_fn(name, f, params, rng, n_coords=20, tol=TOLERANCE):
    """Compare backward() against finite differences at random coordinates."""
    for p in params:
        p.zero_grad()
    nd.backward(f())
    pool = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.values.shape)]
    pick = rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)
    worst = 0.0
    for j in pick:
        i, idx = pool[j]
        num = numeric_grad(f, params[i], [idx])[idx]
        worst = max(worst, relative_error(params[i].grad[idx], num))
    for p in params:
        p.zero_grad()
    return CheckResult(name, worst, len(pick), worst < tol)


# ---------------------------------------------------------------------------
# per-op suites


def _op_suites(rng):
    a = nd.parameter(rng.standard_normal((4, 3)))
    b = nd.parameter(rng.standard_normal((3, 5)))
    pos = nd.parameter(rng.uniform(0.2, 2.0, (4, 3)))
    row1 = nd.parameter(rng.standard_normal((1, 6)))
    row2 = nd.parameter(rng.standard_normal((1, 6)))
    seq = nd.parameter(rng.standard_normal((8, 3)))
    ker = nd.parameter(rng.standard_normal((3 * 3, 2)))
    bias = nd.parameter(rng.standard_normal((1, 2)))
    sq = nd.parameter(rng.uniform(0.1, 1.0, (3, 3)) + np.eye(3))
    proj = {shape: rng.standard_normal(shape) for shape in [(4, 3), (5, 4), (4, 5), (8, 2), (8, 1), (1, 3)]}

    def w(x):
        return nd.sum_(x * proj[x.shape])

    return {
        "add": (lambda: w(a + pos), [a, pos]),
        "sub": (lambda: w(a - pos), [a, pos]),
        "mul": (lambda: w(a * pos), [a, pos]),
        "div": (lambda: w(a / pos), [a, pos]),
        "matmul": (lambda: w(a @ b), [a, b]),
        "transpose": (lambda: w(nd.transpose(b) @ nd.transpose(a)), [a, b]),
        "sigmoid": (lambda: w(nd.sigmoid(a)), [a]),
        "leaky_relu": (lambda: w(nd.leaky_relu(a, 0.2)), [a]),
        "log": (lambda: w(nd.log(pos)), [pos]),
        "power": (lambda: w(nd.power(pos, 2.5)), [pos]),
        "abs": (lambda: w(nd.abs_(a)), [a]),
        "clamp": (lambda: w(nd.clamp(a, -0.5, 0.5)), [a]),
        "sum": (lambda: w(nd.sum_(a, axis=1) * np.ones((1, 3))), [a]),
        "take_rows": (lambda: w(nd.take_rows(nd.sigmoid(a), [0, 2, 2, 1])), [a]),
        "concat": (lambda: w(nd.concat([nd.take_rows(a, [0, 1]), nd.take_rows(pos, [2, 3])], axis=0)), [a, pos]),
        "row_max": (lambda: w(nd.row_max(seq)), [seq]),
        "topk_mean": (lambda: w(nd.topk_mean(a, 2)), [a]),
        "cosine": (lambda: nd.cosine(row1, row2) * 3.0, [row1, row2]),
        "conv1d": (lambda: w(nd.conv1d_temporal(seq, ker, bias, 3, 2)), [seq, ker, bias]),
        "log_cond": (lambda: nd.log_condition_number(sq), [sq]),
    }


def check_ops(seed=0, n_coords=20):
    rng = np.random.default_rng(seed)
    return [check_scalar_fn(name, f, params, rng, n_coords)
            for name, (f, params) in _op_suites(rng).items()]


# ---------------------------------------------------------------------------
# loss components


def _random_labels(rng, n, C):
    ys = []
    for _ in range(n):
        y = (rng.random(C) < 0.4).astype(float)
        if not y.any():
            y[rng.integers(C)] = 1.0
        ys.append(y)
    return ys


def _states_from_leaves(tcams, xs, ys, x_ref, cfg):
    out = []
    for T, x, y in zip(tcams, xs, ys):
        out.append(losses.build_state(_Fwd(x, T), y, x_ref, cfg))
    return out


@dataclass
class _Fwd:
    embeddings: nd.DiffArray
    tcam: nd.DiffArray


def component_checks(seed=0, s=12, d=8, C=4, n=3, n_coords=20):
    """Gradient checks of each loss component and the end-to-end objective."""
    rng = np.random.default_rng(seed)
    h = d // 2
    ys = _random_labels(rng, n, C)
    x_ref = rng.standard_normal(h)
    results = []

    tcams = [nd.parameter(rng.uniform(0.01, 0.99, (s, C))) for _ in range(n)]
    xs = [nd.parameter(rng.standard_normal((s, h))) for _ in range(n)]
    pairing = losses.derangement(n, rng)
    for variant in ("discriminative", "focal", "cross_entropy", "discriminative_no_focal"):
        cfg = LossConfig(classification_variant=variant, denoising_variant="none")

        def f_dis(cfg=cfg):
            return losses.discriminative_loss(_states_from_leaves(tcams, xs, ys, x_ref, cfg), pairing, cfg)

        results.append(check_scalar_fn(f"dis[{variant}]", f_dis, tcams + xs, rng, n_coords))

    lam = nd.parameter(rng.uniform(0.01, 0.99, (s, 1)))
    lam_prime = rng.uniform(0.0, 1.0, s)
    lam_prime[:2] = [0.9, 0.1]

    def f_snip():
        j = losses.snippet_joint(lam, lam_prime)
        return losses.pdmi(j.P, j.Y)

    results.append(check_scalar_fn("pdmi[snippet]", f_snip, [lam], rng, n_coords))

    for variant in ("l1", "bce"):
        cfg = LossConfig(denoising_variant=variant)

        def f_alt(cfg=cfg):
            return losses._snippet_term(losses.snippet_joint(lam, lam_prime), cfg)

        results.append(check_scalar_fn(f"snippet[{variant}]", f_alt, [lam], rng, n_coords))

    preds = [nd.parameter(rng.uniform(0.01, 0.99, (1, C))) for _ in range(n)]

    def f_vid():
        P, Y = losses.video_joint(preds, ys)
        return losses.pdmi(P, Y)

    results.append(check_scalar_fn("pdmi[video]", f_vid, preds, rng, n_coords))

    mcfg = ModelConfig(feature_dim=d, num_classes=C, kernel_size=3, dilation=1, seed=seed)
    params = init_params(mcfg)
    for _, a in params.items():
        a.values += 0.3 * rng.standard_normal(a.values.shape)
    feats = [(rng.standard_normal((s, d)), rng.standard_normal((s, d))) for _ in range(n)]
    for scope in ("both", "snippet_only", "video_only"):
        cfg = LossConfig(denoising_scope=scope)

        def f_total(cfg=cfg):
            states = [losses.build_state(forward(params, r, fl), y, x_ref, cfg)
                      for (r, fl), y in zip(feats, ys)]
            return losses.total_loss(states, pairing, cfg)

        results.append(check_scalar_fn(f"total[{scope}]", f_total, [a for _, a in params.items()],
                                       rng, n_coords))
    return results


def run_all(seeds=(0, 1, 2), n_coords=20, sizes=None):
    sizes = sizes or {}
    report = {}
    for seed in seeds:
        for r in check_ops(seed, n_coords) + component_checks(seed, n_coords=n_coords, **sizes):
            prev = report.get(r.name)
            if prev is None or r.max_rel_err > prev.max_rel_err:
                report[r.name] = r
    return list(report.values())
