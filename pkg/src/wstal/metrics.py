"""Temporal detection metrics: tIoU, per-class AP, mAP over IoU thresholds, F1."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

AVG_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def tiou(a, b):
    a0, a1 = a
    b0, b1 = b
    if not a0 < a1 or not b0 < b1:
        raise UsageError(f"degenerate interval in tiou: {a} vs {b}")
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / (max(a1, b1) - min(a0, b0))


def match_detections(dets, gts, iou_thr):
    """Greedy score-order matching of one class's detections to its gts.

    ``dets``: objects with video_id/start_sec/end_sec/score.
    ``gts``: list of (video_id, start, end). Returns one bool per detection
    in ranked order, plus the ranked detections.
    """
    ranked = sorted(dets, key=lambda d: (-d.score, d.video_id, d.start_sec))
    by_video = defaultdict(list)
    for i, (vid, s, e) in enumerate(gts):
        by_video[vid].append((i, (s, e)))
    used = set()
    hits = []
    for d in ranked:
        best, best_iou = None, iou_thr
        for i, seg in by_video.get(d.video_id, ()):
            if i in used:
                continue
            o = tiou((d.start_sec, d.end_sec), seg)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = i, o
        if best is None:
            hits.append(False)
        else:
            used.add(best)
            hits.append(True)
    return hits, ranked


def ap_from_hits(hits, num_gts):
    """All-points interpolated AP (precision envelope) from ranked TP flags."""
    if num_gts == 0:
        return 0.0 if hits else float("nan")
    if not hits:
        return 0.0
    tp = np.cumsum(hits, dtype=float)
    fp = np.cumsum(np.logical_not(hits), dtype=float)
    recall = tp / num_gts
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(dets, gts, iou_thr):
    """AP of one class; NaN when there are neither gts nor detections."""
    hits, _ = match_detections(dets, gts, iou_thr)
    return ap_from_hits(hits, len(gts))


@dataclass
class EvalReport:
    per_iou_map: dict
    per_class_ap: dict
    avg_map: float
    f1_at_05: float
    counts: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "per_iou_map": {f"{k:.2f}": v for k, v in self.per_iou_map.items()},
            "per_class_ap": {f"{c}@{k:.2f}": (None if np.isnan(v) else v)
                             for (c, k), v in self.per_class_ap.items()},
            "avg_map": self.avg_map,
            "f1_at_05": self.f1_at_05,
            "counts": self.counts,
        }

    def table(self, ious=None):
        ious = sorted(self.per_iou_map) if ious is None else list(ious)
        head = ["mAP@" + f"{i:.2f}".rstrip("0").rstrip(".") for i in ious] + ["AVG", "F1@0.5"]
        vals = [100 * self.per_iou_map[i] for i in ious] + [100 * self.avg_map, 100 * self.f1_at_05]
        width = max(8, max(len(h) for h in head) + 1)
        lines = ["".join(h.rjust(width) for h in head),
                 "".join(f"{v:.1f}".rjust(width) for v in vals)]
        return "\n".join(lines) + "\n"


def evaluate(dets, manifest, ious=(0.1, 0.2, 0.3, 0.4, 0.5), subset="test"):
    videos = {v.id: v for v in manifest.videos}
    C = manifest.num_classes
    for d in dets:
        if d.video_id not in videos:
            raise UsageError(f"detection for unknown video {d.video_id!r}")
        if not 0 <= d.class_id < C:
            raise UsageError(f"detection with unknown class id {d.class_id}")
    eval_videos = [v for v in manifest.videos if subset is None or v.subset == subset]
    gts = defaultdict(list)
    for v in eval_videos:
        for c, s, e in v.gt_segments:
            gts[c].append((v.id, s, e))
    by_class = defaultdict(list)
    for d in dets:
        by_class[d.class_id].append(d)

    all_ious = sorted(set(round(float(i), 4) for i in ious) | set(AVG_IOUS) | {0.5})
    per_iou_map, per_class_ap = {}, {}
    for thr in all_ious:
        aps = []
        for c in range(C):
            ap = average_precision(by_class[c], gts[c], thr)
            per_class_ap[(c, thr)] = ap
            if gts[c]:
                aps.append(ap)
        per_iou_map[thr] = float(np.mean(aps)) if aps else 0.0

    tp = fp = 0
    for c in range(C):
        hits, _ = match_detections(by_class[c], gts[c], 0.5)
        tp += sum(hits)
        fp += len(hits) - sum(hits)
    fn = sum(len(g) for g in gts.values()) - tp
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    avg_map = float(np.mean([per_iou_map[i] for i in AVG_IOUS]))
    requested = {round(float(i), 4) for i in ious}
    return EvalReport(
        per_iou_map={k: v for k, v in per_iou_map.items() if k in requested or k in AVG_IOUS},
        per_class_ap=per_class_ap,
        avg_map=avg_map,
        f1_at_05=f1,
        counts={"tp": int(tp), "fp": int(fp), "fn": int(fn)},
    )


def save_report(report, json_path, text_path=None, ious=None):
    with open(json_path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(report.table(ious))
