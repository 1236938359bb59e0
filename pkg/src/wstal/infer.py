"""Turning a TCAM and bottom-up attention into scored temporal detections."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import snippet_to_seconds
from .errors import ConfigError
from .model import forward


def _default_thresholds():
    return tuple(round(0.025 * i, 3) for i in range(1, 21))


@dataclass(frozen=True)
class InferConfig:
    thresholds: tuple = field(default_factory=_default_thresholds)
    nms_iou: float = 0.5
    s_th_fraction: float = 0.10
    inflation_fraction: float = 0.25
    p_th_fraction: float = 0.5

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if not th or any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("thresholds must be strictly increasing values in (0, 1)")


@dataclass(frozen=True)
class Proposal:
    class_id: int
    start: int  # inclusive snippet index
    end: int  # inclusive snippet index
    score: float
    threshold_origin: float = 0.0

    @property
    def length(self):
        return self.end - self.start + 1


@dataclass(frozen=True)
class Detection:
    video_id: str
    class_id: int
    start_sec: float
    end_sec: float
    score: float


def relevant_classes(p, p_th_fraction=0.5):
    p = np.asarray(p, dtype=float).reshape(-1)
    keep = set(np.flatnonzero(p >= p_th_fraction * p.max()).tolist())
    keep.add(int(np.argmax(p)))
    return sorted(keep)


def refine(tcam_c, lam_prime):
    return np.asarray(tcam_c, dtype=float).reshape(-1) * np.asarray(lam_prime, dtype=float).reshape(-1)


def segments_at_threshold(r, thr):
    """Maximal runs of consecutive snippets with ``r > thr`` (inclusive ends)."""
    above = np.asarray(r).reshape(-1) > thr
    if not above.any():
        return []
    padded = np.concatenate([[False], above, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def score_proposal(r, seg, inflation_fraction=0.25):
    """Outer-inner contrast: mean inside minus mean of the inflated flanks."""
    r = np.asarray(r, dtype=float).reshape(-1)
    s = r.size
    start, end = seg
    inner = r[start:end + 1].mean()
    w = max(1, _round_half_up(inflation_fraction * (end - start + 1)))
    left = r[max(0, start - w):start]
    right = r[end + 1:min(s, end + 1 + w)]
    outer = np.concatenate([left, right])
    return float(inner - (outer.mean() if outer.size else 0.0))


def snippet_tiou(a, b):
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def _nms_key(p):
    return (-p.score, p.start, -p.length)


def nms(proposals, iou_thr=0.5):
    """Greedy suppression for proposals of a single class."""
    remaining = sorted(proposals, key=_nms_key)
    kept = []
    for cand in remaining:
        if all(snippet_tiou(cand, k) <= iou_thr for k in kept):
            kept.append(cand)
    return kept


def class_proposals(r, class_id, cfg):
    """All distinct scored segments of ``r`` over the threshold grid."""
    by_span = {}
    for thr in cfg.thresholds:
        for seg in segments_at_threshold(r, thr):
            if seg in by_span:
                continue
            by_span[seg] = Proposal(class_id, seg[0], seg[1],
                                    score_proposal(r, seg, cfg.inflation_fraction), thr)
    return list(by_span.values())


def detect(tcam, lam_prime, p, record, cfg, snippet_frames=16):
    """Detections for one video, sorted by score (highest first)."""
    tcam = np.asarray(tcam, dtype=float)
    pool = {}
    for c in relevant_classes(p, cfg.p_th_fraction):
        pool[c] = class_proposals(refine(tcam[:, c], lam_prime), c, cfg)
    all_scores = [q.score for props in pool.values() for q in props]
    if not all_scores:
        return []
    cutoff = cfg.s_th_fraction * max(all_scores)
    dets = []
    for c, props in pool.items():
        for q in nms(props, cfg.nms_iou):
            if q.score > cutoff:
                dets.append(Detection(
                    record.id, c,
                    snippet_to_seconds(q.start, snippet_frames, record.fps),
                    snippet_to_seconds(q.end + 1, snippet_frames, record.fps),
                    q.score,
                ))
    dets.sort(key=lambda d: (-d.score, d.class_id, d.start_sec))
    return dets


def video_outputs(params, x_ref, rgb, flow):
    """TCAM, bottom-up attention and video prediction as plain arrays."""
    out = forward(params, rgb, flow)
    lam_prime = losses.bottomup_attention(out.embeddings, x_ref)
    p = losses.video_prediction(out.tcam).values.reshape(-1)
    return out.tcam.values, lam_prime, p


def infer_manifest(params, x_ref, manifest, cfg, subset="test", workers=1):
    videos = manifest.subset(subset) if subset else list(manifest.videos)

    def run(video):
        rgb, flow = manifest.load_features(video)
        tcam, lam_prime, p = video_outputs(params, x_ref, rgb.astype(float), flow.astype(float))
        return detect(tcam, lam_prime, p, video, cfg, manifest.snippet_frames)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_video = list(pool.map(run, videos))
    else:
        per_video = [run(v) for v in videos]
    return sort_detections([d for dets in per_video for d in dets])


def sort_detections(dets):
    return sorted(dets, key=lambda d: (d.video_id, -d.score, d.class_id, d.start_sec))


def save_detections(dets, path):
    with open(path, "w") as fh:
        json.dump([asdict(d) for d in sort_detections(dets)], fh, indent=1)
        fh.write("\n")


def load_detections(path):
    with open(path) as fh:
        raw = json.load(fh)
    return [Detection(str(d["video_id"]), int(d["class_id"]), float(d["start_sec"]),
                      float(d["end_sec"]), float(d["score"])) for d in raw]
