"""Training objective: discriminative loss plus pDMI denoising.

``total = L_dis + alpha * (L_DS + L_DV)``. ``L_dis`` is a focal-style
multi-label loss whose penalty factors also carry cosine separation and
grouping weights between foreground/background embeddings of paired videos.
``L_DS`` and ``L_DV`` are log condition numbers of prediction/label joint
matrices at snippet and video level.

Set membership (which snippets count as foreground/background), pseudo-labels,
bottom-up attention and the EMA reference never carry gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, NumericError, UsageError

log = logging.getLogger(__name__)

LOG_EPS = 1e-12

CLASSIFICATION_VARIANTS = ("cross_entropy", "focal", "discriminative", "discriminative_no_focal")
DENOISING_VARIANTS = ("none", "pdmi", "l1", "bce")
DENOISING_SCOPES = ("snippet_only", "video_only", "both")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    gamma: float = 0.01
    beta: float = 2.0
    tau: float = 0.5
    rank_tol: float = 1e-9
    classification_variant: str = "discriminative"
    denoising_variant: str = "pdmi"
    denoising_scope: str = "both"

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or self.beta < 0:
            raise ConfigError("alpha, gamma and beta must be non-negative")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.classification_variant not in CLASSIFICATION_VARIANTS:
            raise ConfigError(f"unknown classification_variant {self.classification_variant!r}")
        if self.denoising_variant not in DENOISING_VARIANTS:
            raise ConfigError(f"unknown denoising_variant {self.denoising_variant!r}")
        if self.denoising_scope not in DENOISING_SCOPES:
            raise ConfigError(f"unknown denoising_scope {self.denoising_scope!r}")

    @property
    def uses_pairs(self):
        return self.classification_variant in ("discriminative", "discriminative_no_focal")


# Named ablation presets as (classification_variant, denoising_variant). The
# first four form the loss ladder; l1/bce swap the snippet denoising term.
ABLATION_VARIANTS = {
    "ce": ("cross_entropy", "none"),
    "focal": ("focal", "none"),
    "dis": ("discriminative", "none"),
    "full": ("discriminative", "pdmi"),
    "l1": ("discriminative", "l1"),
    "bce": ("discriminative", "bce"),
}
LADDER = ("ce", "focal", "dis", "full")


def ablation_config(name, base=None):
    """``base`` (default LossConfig()) with the variant fields of a preset."""
    if name not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    cls, den = ABLATION_VARIANTS[name]
    return replace(base or LossConfig(), classification_variant=cls, denoising_variant=den)


ABLATIONS = {name: ablation_config(name) for name in ABLATION_VARIANTS}


@dataclass
class SnippetJoint:
    P: nd.DiffArray | None  # 2 x z
    Y: nd.DiffArray | None  # z x 2, constant
    fg_index: np.ndarray
    bg_index: np.ndarray

    @property
    def valid(self):
        return len(self.fg_index) > 0 and len(self.bg_index) > 0


@dataclass
class VideoLossState:
    x_fg: nd.DiffArray
    x_bg: nd.DiffArray
    fg_empty: bool
    bg_empty: bool
    lam: nd.DiffArray  # s x 1 top-down attention
    lam_prime: np.ndarray  # length s, gradient-free
    p: nd.DiffArray  # 1 x C
    y: np.ndarray  # length C, 0/1
    joint: SnippetJoint | None = None


@dataclass
class EmaRef:
    x_ref: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), 0)


# ---------------------------------------------------------------------------
# attention and embeddings


def topdown_attention(tcam):
    return nd.row_max(tcam)


def topk_for(s):
    return math.ceil(s / 8)


def video_prediction(tcam):
    tcam = nd.as_diff(tcam)
    return nd.topk_mean(tcam, topk_for(tcam.rows))


def fg_bg_embeddings(x, lam, tau=0.5):
    """Attention-weighted sums of snippet embeddings above ``tau``.

    An empty index set falls back to the single snippet with the largest
    (foreground or background) attention and is flagged.
    """
    lv = lam.values[:, 0]
    fg = np.flatnonzero(lv > tau)
    bg = np.flatnonzero(1.0 - lv > tau)
    fg_empty = fg.size == 0
    bg_empty = bg.size == 0
    if fg_empty:
        fg = np.array([int(np.argmax(lv))])
    if bg_empty:
        bg = np.array([int(np.argmax(1.0 - lv))])
    w_fg = nd.take_rows(lam, fg)
    w_bg = 1.0 - nd.take_rows(lam, bg)
    x_fg = w_fg.T @ nd.take_rows(x, fg)
    x_bg = w_bg.T @ nd.take_rows(x, bg)
    return x_fg, x_bg, fg_empty, bg_empty


def bottomup_attention(x, x_ref):
    """``0.5 * (1 - cos(x(t), x_ref))`` on detached values."""
    xv = np.asarray(x.values if isinstance(x, nd.DiffArray) else x, dtype=float)
    ref = np.asarray(x_ref, dtype=float).reshape(-1)
    nr = np.linalg.norm(ref)
    if nr < nd.COSINE_EPS:
        return np.full(xv.shape[0], 0.5)
    nx = np.linalg.norm(xv, axis=1)
    cos = np.zeros(xv.shape[0])
    ok = nx >= nd.COSINE_EPS
    cos[ok] = (xv[ok] @ ref) / (nx[ok] * nr)
    return 0.5 * (1.0 - cos)


def update_ema_ref(ref, batch_bg_embeddings, momentum=0.9):
    if len(batch_bg_embeddings) == 0:
        raise UsageError("update_ema_ref needs a nonempty batch")
    rows = [np.asarray(e.values if isinstance(e, nd.DiffArray) else e, dtype=float).reshape(-1)
            for e in batch_bg_embeddings]
    mu = np.mean(rows, axis=0)
    return EmaRef(momentum * ref.x_ref + (1.0 - momentum) * mu, ref.iteration + 1)


# ---------------------------------------------------------------------------
# joint distributions


def snippet_joint(lam, lam_prime):
    lp = np.asarray(lam_prime, dtype=float).reshape(-1)
    fg = np.flatnonzero(lp > 0.5)
    bg = np.flatnonzero(lp < 0.5)
    if fg.size == 0 or bg.size == 0:
        return SnippetJoint(None, None, fg, bg)
    z = fg.size + bg.size
    row = nd.take_rows(lam, np.concatenate([fg, bg])).T  # 1 x z
    P = nd.concat([row, 1.0 - row], axis=0)
    Y = np.zeros((z, 2))
    Y[: fg.size, 0] = 1.0 / z
    Y[fg.size:, 1] = 1.0 / z
    return SnippetJoint(P, nd.constant(Y), fg, bg)


def video_joint(preds, labels):
    if len(preds) == 0:
        raise UsageError("video_joint needs at least one video")
    n = len(preds)
    P = nd.concat(list(preds), axis=0).T  # C x n
    Y = np.stack([np.asarray(y, dtype=float).reshape(-1) for y in labels]) / n
    if Y.shape[1] != P.rows:
        raise UsageError(f"labels have {Y.shape[1]} classes, predictions {P.rows}")
    return P, nd.constant(Y)


def pdmi(P, Y, rank_tol=1e-9):
    """Log condition number of ``P @ Y``; raises NumericError if it is zero."""
    U = P @ Y
    if not np.any(U.values):
        raise NumericError("pdmi: joint distribution matrix is zero")
    return nd.log_condition_number(U, rank_tol)


# ---------------------------------------------------------------------------
# per-video state


def build_state(out, y, x_ref, cfg):
    """Everything the losses need from one video's forward pass."""
    lam = topdown_attention(out.tcam)
    x_fg, x_bg, fg_empty, bg_empty = fg_bg_embeddings(out.embeddings, lam, cfg.tau)
    lam_prime = bottomup_attention(out.embeddings, x_ref)
    return VideoLossState(
        x_fg=x_fg,
        x_bg=x_bg,
        fg_empty=fg_empty,
        bg_empty=bg_empty,
        lam=lam,
        lam_prime=lam_prime,
        p=video_prediction(out.tcam),
        y=np.asarray(y, dtype=float).reshape(-1),
        joint=snippet_joint(lam, lam_prime),
    )


def derangement(n, rng):
    """Random permutation without fixed points (ring shift of a shuffle)."""
    if n < 2:
        return np.zeros(n, dtype=int)
    order = rng.permutation(n)
    pairing = np.empty(n, dtype=int)
    pairing[order] = np.roll(order, -1)
    return pairing


# ---------------------------------------------------------------------------
# discriminative loss


def pair_weights(own, other, gamma):
    w_fb = nd.clamp(nd.cosine(own.x_fg, other.x_bg), lo=0.0)
    w_fg = gamma * (1.0 - nd.cosine(own.x_fg, other.x_fg))
    w_bg = gamma * (1.0 - nd.cosine(own.x_bg, other.x_bg))
    return w_fb, w_fg, w_bg


def _video_dis_loss(p, y, w, cfg):
    variant = cfg.classification_variant
    beta = 0.0 if variant == "cross_entropy" else cfg.beta
    p_safe = nd.clamp(p, LOG_EPS, 1.0 - LOG_EPS)
    if w is None:
        pos_base = 1.0 - p
        neg_base = p
    else:
        w_fb, w_fg, w_bg = w
        if variant == "discriminative_no_focal":
            pos_base = nd.constant(np.zeros(p.shape)) + w_fg + w_fb
            neg_base = nd.constant(np.zeros(p.shape)) + w_bg + w_fb
        else:
            pos_base = (1.0 - p) + w_fg + w_fb
            neg_base = p + w_bg + w_fb
    pos = nd.power(nd.clamp(pos_base, lo=0.0), beta) * nd.log(p_safe)
    neg = nd.power(nd.clamp(neg_base, lo=0.0), beta) * nd.log(1.0 - p_safe)
    yv = y.reshape(1, -1)
    return -nd.sum_(pos * yv + neg * (1.0 - yv))


def discriminative_loss(batch, pairing, cfg):
    """Mean over the batch of the per-video classification loss."""
    if len(batch) == 0:
        raise UsageError("discriminative_loss needs a nonempty batch")
    if cfg.uses_pairs and len(batch) < 2:
        raise UsageError("the discriminative variant needs at least two videos to pair")
    total = None
    for v, state in enumerate(batch):
        w = None
        if cfg.uses_pairs:
            partner = int(pairing[v])
            if partner == v:
                raise UsageError(f"pairing maps video {v} to itself")
            w = pair_weights(state, batch[partner], cfg.gamma)
        term = _video_dis_loss(state.p, state.y, w, cfg)
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


# ---------------------------------------------------------------------------
# denoising loss


def _snippet_term(joint, cfg):
    if cfg.denoising_variant == "pdmi":
        return pdmi(joint.P, joint.Y, cfg.rank_tol)
    z = joint.Y.rows
    if cfg.denoising_variant == "l1":
        return nd.mean(nd.abs_(joint.P - joint.Y.values.T * z))
    # bce: pseudo-foreground target 1, pseudo-background target 0
    target = (joint.Y.values[:, 0] > 0).astype(float).reshape(1, -1)
    lam_row = nd.clamp(nd.take_rows(joint.P, [0]), LOG_EPS, 1.0 - LOG_EPS)
    ll = nd.log(lam_row) * target + nd.log(1.0 - lam_row) * (1.0 - target)
    return -nd.mean(ll)


def snippet_denoising(batch, cfg):
    terms = [_snippet_term(st.joint, cfg) for st in batch if st.joint is not None and st.joint.valid]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def video_denoising(batch, cfg):
    P, Y = video_joint([st.p for st in batch], [st.y for st in batch])
    try:
        return pdmi(P, Y, cfg.rank_tol)
    except NumericError:
        log.warning("video-level joint matrix is zero; skipping L_DV for this batch")
        return None


@dataclass
class LossTerms:
    total: nd.DiffArray
    dis: nd.DiffArray
    ds: nd.DiffArray | None = None
    dv: nd.DiffArray | None = None
    extras: dict = field(default_factory=dict)

    def scalars(self):
        def val(a):
            return 0.0 if a is None else a.item()

        return {"L_Dis": val(self.dis), "L_DS": val(self.ds), "L_DV": val(self.dv),
                "total": val(self.total)}


def denoising_loss(batch, cfg):
    """``(L_DS, L_DV)``; either may be None when absent or skipped."""
    if len(batch) == 0:
        raise UsageError("denoising_loss needs a nonempty batch")
    if cfg.denoising_variant == "none":
        return None, None
    ds = dv = None
    if cfg.denoising_scope in ("snippet_only", "both"):
        ds = snippet_denoising(batch, cfg)
    if cfg.denoising_scope in ("video_only", "both"):
        dv = video_denoising(batch, cfg)
    return ds, dv


def compute_losses(batch, pairing, cfg):
    dis = discriminative_loss(batch, pairing, cfg)
    ds, dv = denoising_loss(batch, cfg)
    total = dis
    parts = [t for t in (ds, dv) if t is not None]
    if parts and cfg.alpha != 0:
        d = parts[0] if len(parts) == 1 else parts[0] + parts[1]
        total = dis + d * cfg.alpha
    return LossTerms(total=total, dis=dis, ds=ds, dv=dv)


def total_loss(batch, pairing, cfg):
    return compute_losses(batch, pairing, cfg).total
