"""Feature files, dataset manifests, the synthetic benchmark and batch sampling."""
from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError

FEATURE_MAGIC = b"D2FT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class BinaryReader:
    """Little-endian cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, data, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} remain",
                self.pos, self.path,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        st = struct.Struct("<" + fmt)
        vals = st.unpack(self.take(st.size, what))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype, count, what):
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt, count=count).astype(dt.newbyteorder("="))

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.pos} unexpected trailing bytes", self.pos, self.path
            )


def write_features(path, matrix):
    """Store an ``s x d`` matrix as float32 rows behind a ``D2FT`` header."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise UsageError(f"features must be a nonempty s x d matrix, got shape {m.shape}")
    s, d = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, s, d))
        fh.write(payload)


def read_features(path):
    data = Path(path).read_bytes()
    r = BinaryReader(data, path)
    magic = r.take(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0, path)
    version = r.unpack("I", "version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    s, d = r.unpack("II", "shape header")
    if s < 1 or d < 1:
        raise FormatError(f"empty shape ({s}, {d})", 8, path)
    values = r.array("f4", s * d, "feature payload")
    r.expect_end()
    return values.reshape(s, d)


# ---------------------------------------------------------------------------
# manifest


def snippet_to_seconds(index, snippet_frames, fps):
    return index * snippet_frames / fps


def seconds_to_snippet(seconds, snippet_frames, fps):
    return int(np.floor(seconds * fps / snippet_frames + 1e-9))


@dataclass(frozen=True)
class TrainVideo:
    """The view of a video the trainer gets: no ground-truth segments."""

    id: str
    fps: float
    num_snippets: int
    rgb_path: str
    flow_path: str
    labels: tuple


@dataclass(frozen=True)
class VideoRecord:
    id: str
    fps: float
    num_snippets: int
    rgb_path: str
    flow_path: str
    labels: tuple
    gt_segments: tuple = ()
    subset: str = "train"

    def training_view(self):
        return TrainVideo(self.id, self.fps, self.num_snippets, self.rgb_path,
                          self.flow_path, self.labels)


@dataclass
class DatasetManifest:
    classes: list
    videos: list
    snippet_frames: int = 16
    root: Path = field(default=Path("."), compare=False)

    @property
    def num_classes(self):
        return len(self.classes)

    def subset(self, name):
        return [v for v in self.videos if v.subset == name]

    def training_videos(self):
        return [v.training_view() for v in self.subset("train")]

    def video(self, video_id):
        for v in self.videos:
            if v.id == video_id:
                return v
        raise UsageError(f"unknown video id {video_id!r}")

    def resolve(self, rel):
        return self.root / rel

    def load_features(self, video):
        return (read_features(self.resolve(video.rgb_path)),
                read_features(self.resolve(video.flow_path)))

    def label_vector(self, video):
        y = np.zeros(self.num_classes)
        y[list(video.labels)] = 1.0
        return y

    def to_json(self):
        return {
            "classes": list(self.classes),
            "snippet_frames": self.snippet_frames,
            "videos": [
                {**asdict(v), "labels": list(v.labels),
                 "gt_segments": [list(g) for g in v.gt_segments]}
                for v in self.videos
            ],
        }

    def validate(self, check_files=True, feature_dim=None):
        if len(set(self.classes)) != len(self.classes):
            raise DataError("class names are not unique")
        seen = set()
        for v in self.videos:
            if v.id in seen:
                raise DataError(f"duplicate video id {v.id!r}")
            seen.add(v.id)
            if v.fps <= 0:
                raise DataError(f"{v.id}: fps must be positive")
            if v.subset == "train" and not v.labels:
                raise DataError(f"{v.id}: training video without labels")
            for c in v.labels:
                if not 0 <= c < self.num_classes:
                    raise DataError(f"{v.id}: unknown class id {c}")
            for c, start, end in v.gt_segments:
                if not 0 <= c < self.num_classes:
                    raise DataError(f"{v.id}: segment with unknown class id {c}")
                if c not in v.labels:
                    raise DataError(f"{v.id}: segment class {c} missing from labels")
                if not 0 <= start < end:
                    raise DataError(f"{v.id}: segment ({start}, {end}) needs 0 <= start < end")
            if check_files:
                for p in (v.rgb_path, v.flow_path):
                    full = self.resolve(p)
                    if not full.exists():
                        raise DataError(f"{v.id}: missing feature file {full}")
                    s, d = _peek_shape(full)
                    if s != v.num_snippets or (feature_dim is not None and d != feature_dim):
                        raise DataError(
                            f"{v.id}: {p} has shape ({s}, {d}), manifest says "
                            f"({v.num_snippets}, {feature_dim if feature_dim else d})"
                        )
        return self


def _peek_shape(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("truncated header", len(head), path)
    magic, version, s, d = _HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    return s, d


def load_manifest(path, check_files=True):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    try:
        videos = [
            VideoRecord(
                id=str(v["id"]),
                fps=float(v["fps"]),
                num_snippets=int(v["num_snippets"]),
                rgb_path=v["rgb_path"],
                flow_path=v["flow_path"],
                labels=tuple(int(c) for c in v["labels"]),
                gt_segments=tuple((int(c), float(a), float(b)) for c, a, b in v.get("gt_segments", [])),
                subset=v.get("subset", "train"),
            )
            for v in raw["videos"]
        ]
        manifest = DatasetManifest(list(raw["classes"]), videos,
                                   int(raw.get("snippet_frames", 16)), path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    return manifest.validate(check_files=check_files)


def save_manifest(manifest, path):
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    num_train: int = 60
    num_test: int = 20
    snippets_range: tuple = (40, 96)
    feature_dim: int = 32
    instances_range: tuple = (1, 5)
    instance_len_range: tuple = (3, 10)
    noise_sigma: float = 0.4
    max_classes_per_video: int = 2
    fps: float = 25.0
    snippet_frames: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snippets_range", tuple(self.snippets_range))
        object.__setattr__(self, "instances_range", tuple(self.instances_range))
        object.__setattr__(self, "instance_len_range", tuple(self.instance_len_range))
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigError("feature_dim must be even")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for name in ("snippets_range", "instances_range", "instance_len_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.snippets_range[0] < self.instance_len_range[1] + 2:
            raise ConfigError("videos too short to hold the longest instance")


def draw_prototypes(num_classes, dim, rng):
    """Unit vectors for the background (row 0) and each class (rows 1..C)."""
    protos = rng.standard_normal((num_classes + 1, dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _plant_segments(s, count, len_range, rng):
    """Up to ``count`` non-overlapping runs separated by at least one snippet."""
    for attempt in range(200):
        lengths = rng.integers(len_range[0], len_range[1] + 1, size=count)
        slack = s - int(lengths.sum()) - (count - 1)
        if slack < 0:
            if attempt % 20 == 19 and count > 1:
                count -= 1
            continue
        # distribute free snippets over count+1 gaps
        cuts = np.sort(rng.integers(0, slack + 1, size=count))
        gaps = np.diff(np.concatenate([[0], cuts]))
        segs, t = [], 0
        for length, gap in zip(lengths, gaps):
            t += int(gap)
            segs.append((t, t + int(length) - 1))
            t += int(length) + 1
        return segs
    raise ConfigError(f"cannot plant segments into a {s}-snippet video")


def generate_videos(cfg, rng=None):
    """In-memory synthetic data: (prototypes, list of dicts with features)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    protos = draw_prototypes(cfg.num_classes, cfg.feature_dim, rng)
    out = []
    for i in range(cfg.num_train + cfg.num_test):
        subset = "train" if i < cfg.num_train else "test"
        s = int(rng.integers(cfg.snippets_range[0], cfg.snippets_range[1] + 1))
        n_cls = int(rng.integers(1, min(cfg.max_classes_per_video, cfg.num_classes) + 1))
        n_inst = int(rng.integers(cfg.instances_range[0], cfg.instances_range[1] + 1))
        n_inst = max(n_inst, n_cls)
        video_classes = rng.choice(cfg.num_classes, size=n_cls, replace=False)
        segs = _plant_segments(s, n_inst, cfg.instance_len_range, rng)
        seg_classes = list(video_classes) + list(rng.choice(video_classes, size=max(0, len(segs) - n_cls)))
        seg_classes = [int(c) for c in rng.permutation(seg_classes[:len(segs)])]
        clean = np.tile(protos[0], (s, 1))
        for (a, b), c in zip(segs, seg_classes):
            clean[a:b + 1] = protos[c + 1]
        rgb = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)
        flow = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)
        out.append({
            "id": f"video_{i:04d}",
            "subset": subset,
            "num_snippets": s,
            "labels": tuple(sorted(set(seg_classes))),
            "segments": [(c, a, b) for (a, b), c in sorted(zip(segs, seg_classes))],
            "rgb": rgb.astype(np.float32),
            "flow": flow.astype(np.float32),
            "clean": clean,
        })
    return protos, out


def generate_synthetic(cfg, out_dir):
    """Write feature files and ``manifest.json`` under ``out_dir``.

    Everything is first written to a sibling temporary directory and moved
    into place at the end, so a failure leaves no partial output behind.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise DataError(f"output path {out_dir} exists and is not a directory")
    parent = out_dir.parent
    if not parent.is_dir():
        raise DataError(f"parent directory {parent} does not exist")
    _, videos = generate_videos(cfg)
    staging = Path(tempfile.mkdtemp(prefix=".synth-", dir=parent))
    try:
        (staging / "features").mkdir()
        records = []
        L = cfg.snippet_frames
        for v in videos:
            rgb_rel = f"features/{v['id']}_rgb.d2ft"
            flow_rel = f"features/{v['id']}_flow.d2ft"
            write_features(staging / rgb_rel, v["rgb"])
            write_features(staging / flow_rel, v["flow"])
            gts = tuple(
                (c, snippet_to_seconds(a, L, cfg.fps), snippet_to_seconds(b + 1, L, cfg.fps))
                for c, a, b in v["segments"]
            )
            records.append(VideoRecord(v["id"], cfg.fps, v["num_snippets"], rgb_rel, flow_rel,
                                       v["labels"], gts, v["subset"]))
        classes = [f"action_{c}" for c in range(cfg.num_classes)]
        manifest = DatasetManifest(classes, records, L, staging)
        save_manifest(manifest, staging / "manifest.json")
        out_dir.mkdir(exist_ok=True)
        for item in staging.iterdir():
            target = out_dir / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            os.replace(item, target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    manifest.root = out_dir
    return manifest


# ---------------------------------------------------------------------------
# batches


@dataclass
class BatchItem:
    video: TrainVideo
    rgb: np.ndarray
    flow: np.ndarray
    y: np.ndarray


class FeatureCache:
    """Loads every training video's features once and serves batches."""

    def __init__(self, manifest, videos=None):
        self.manifest = manifest
        self.videos = manifest.training_videos() if videos is None else list(videos)
        self._feats = {}

    def get(self, video):
        if video.id not in self._feats:
            rgb, flow = self.manifest.load_features(video)
            self._feats[video.id] = (rgb.astype(np.float64), flow.astype(np.float64))
        return self._feats[video.id]

    def item(self, video):
        rgb, flow = self.get(video)
        return BatchItem(video, rgb, flow, self.manifest.label_vector(video))


def sample_batch(manifest_or_cache, batch_size, rng):
    """Uniform sample without replacement of ``batch_size`` training videos."""
    cache = manifest_or_cache if isinstance(manifest_or_cache, FeatureCache) else FeatureCache(manifest_or_cache)
    n = len(cache.videos)
    if not 1 <= batch_size <= n:
        raise UsageError(f"batch_size {batch_size} must lie in [1, {n}]")
    idx = rng.choice(n, size=batch_size, replace=False)
    return [cache.item(cache.videos[i]) for i in idx]
