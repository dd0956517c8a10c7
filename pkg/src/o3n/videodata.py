"""Flat binary video container, corpus directories and the synthetic sprite corpus.

Container layout (little-endian)::

    b"O3NV" | u32 version=1 | u32 n | u32 h | u32 w | u32 c | n*h*w*c bytes (u8)

A corpus directory holds one container per video plus ``index.tsv`` with
``<relative-path>\\t<label-int>\\t<split>`` lines and ``classes.txt``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, IoError, MalformedContainer

VIDEO_MAGIC = b"O3NV"
VIDEO_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
HEADER_SIZE = _HEADER.size

SPLITS = ("train", "val", "test")
MOTION_CLASSES = ("rightward", "leftward", "downward", "upward", "oscillating", "circular")


@dataclass(eq=False)
class Video:
    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise DimensionError(f"video frames must be (n, h, w, c), got shape {f.shape}")
        if f.dtype != np.uint8:
            raise DimensionError(f"video frames must be uint8, got {f.dtype}")
        n, h, w, c = f.shape
        if n < 1 or h < 8 or w < 8 or c != 3:
            raise DimensionError(f"invalid video dimensions n={n} h={h} w={w} c={c}")
        self.frames = f

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def h(self) -> int:
        return self.frames.shape[1]

    @property
    def w(self) -> int:
        return self.frames.shape[2]

    @property
    def c(self) -> int:
        return self.frames.shape[3]

    def __eq__(self, other):
        if not isinstance(other, Video):
            return NotImplemented
        return self.frames.shape == other.frames.shape and np.array_equal(self.frames, other.frames)


@dataclass
class LabeledCorpus:
    videos: list
    labels: list
    class_names: list
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.videos)
        if not (len(self.videos) == len(self.labels) == len(self.splits)):
            raise ConfigError("videos, labels and splits must have equal length")
        k = len(self.class_names)
        for lab in self.labels:
            if not 0 <= int(lab) < k:
                raise ConfigError(f"label {lab} outside [0, {k})")
        for s in self.splits:
            if s not in SPLITS:
                raise ConfigError(f"unknown split tag {s!r}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.videos)

    def subset(self, *splits: str) -> "LabeledCorpus":
        keep = [i for i, s in enumerate(self.splits) if s in splits]
        return LabeledCorpus(
            videos=[self.videos[i] for i in keep],
            labels=[self.labels[i] for i in keep],
            class_names=list(self.class_names),
            splits=[self.splits[i] for i in keep],
        )


@dataclass
class SynthConfig:
    num_videos_per_class: int = 40
    num_classes: int = 6
    h: int = 32
    w: int = 32
    frames_per_video: int = 24
    sprite_size: int = 6
    noise_std: float = 8.0
    seed: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.3

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_classes > len(MOTION_CLASSES):
            raise ConfigError(f"at most {len(MOTION_CLASSES)} motion classes are available")
        if self.num_videos_per_class < 1:
            raise ConfigError("num_videos_per_class must be >= 1")
        if self.h < 8 or self.w < 8:
            raise ConfigError("h and w must be >= 8")
        if self.frames_per_video < 2:
            raise ConfigError("frames_per_video must be >= 2")
        if not 1 <= self.sprite_size <= min(self.h, self.w) // 2:
            raise ConfigError("sprite_size must be in [1, min(h, w) / 2]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not (0 <= self.val_fraction and 0 <= self.test_fraction and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("val_fraction + test_fraction must be < 1")


# --------------------------------------------------------------------------
# container I/O


def save_video(v: Video, path) -> None:
    header = _HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, v.n, v.h, v.w, v.c)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(v.frames, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write video to {path}: {exc}") from exc


def load_video(path) -> Video:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read video {path}: {exc}") from exc
    if len(blob) < HEADER_SIZE:
        raise MalformedContainer(f"{path}: truncated header")
    magic, version, n, h, w, c = _HEADER.unpack_from(blob)
    if magic != VIDEO_MAGIC:
        raise MalformedContainer(f"{path}: bad magic {magic!r}")
    if version != VIDEO_VERSION:
        raise MalformedContainer(f"{path}: unsupported version {version}")
    if 0 in (n, h, w, c):
        raise DimensionError(f"{path}: zero dimension in header ({n}, {h}, {w}, {c})")
    expected = n * h * w * c
    payload = len(blob) - HEADER_SIZE
    if payload != expected:
        raise MalformedContainer(f"{path}: payload has {payload} bytes, header implies {expected}")
    frames = np.frombuffer(blob, dtype=np.uint8, offset=HEADER_SIZE).reshape(n, h, w, c).copy()
    return Video(frames)


def save_corpus(corpus: LabeledCorpus, directory) -> Path:
    root = Path(directory)
    try:
        (root / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create corpus directory {root}: {exc}") from exc
    lines = []
    for i, (v, lab, split) in enumerate(zip(corpus.videos, corpus.labels, corpus.splits)):
        rel = f"videos/{i:05d}.o3nv"
        save_video(v, root / rel)
        lines.append(f"{rel}\t{int(lab)}\t{split}\n")
    try:
        (root / "index.tsv").write_text("".join(lines))
        (root / "classes.txt").write_text("".join(f"{name}\n" for name in corpus.class_names))
    except OSError as exc:
        raise IoError(f"cannot write corpus index in {root}: {exc}") from exc
    return root


def load_corpus(directory) -> LabeledCorpus:
    root = Path(directory)
    index = root / "index.tsv"
    if not index.is_file():
        raise IoError(f"corpus index not found: {index}")
    videos, labels, splits = [], [], []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedContainer(f"{index}:{lineno}: expected 3 tab-separated fields")
        rel, lab, split = parts
        videos.append(load_video(root / rel))
        labels.append(int(lab))
        splits.append(split)
    classes_file = root / "classes.txt"
    if classes_file.is_file():
        class_names = classes_file.read_text().split()
    else:
        class_names = [str(k) for k in range(max(labels) + 1)]
    return LabeledCorpus(videos, labels, class_names, splits)


# --------------------------------------------------------------------------
# synthetic corpus


def _trajectory(kind: str, n: int, span_y: float, span_x: float, rng: np.random.Generator):
    """Top-left sprite positions (y, x) for every frame, each within [0, span]."""
    t = np.arange(n, dtype=np.float64)
    if kind in ("rightward", "leftward", "downward", "upward"):
        horizontal = kind in ("rightward", "leftward")
        span_move, span_fixed = (span_x, span_y) if horizontal else (span_y, span_x)
        speed = rng.uniform(0.5, 1.0) * span_move / max(n - 1, 1)
        travel = speed * (n - 1)
        start = rng.uniform(0.0, span_move - travel)
        fixed = np.full(n, rng.uniform(0.0, span_fixed))
        # leftward/upward replay the rightward/downward path backwards
        steps = t if kind in ("rightward", "downward") else (n - 1 - t)
        moving = start + speed * steps
        return (fixed, moving) if horizontal else (moving, fixed)
    if kind == "oscillating":
        amp = rng.uniform(0.25, 0.5) * span_x
        centre = rng.uniform(amp, span_x - amp)
        period = rng.uniform(14.0, 22.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        x = centre + amp * np.sin(2 * math.pi * t / period + phase)
        y = np.full(n, rng.uniform(0.0, span_y))
        return y, x
    if kind == "circular":
        amp = rng.uniform(0.25, 0.45) * min(span_x, span_y)
        cy = rng.uniform(amp, span_y - amp)
        cx = rng.uniform(amp, span_x - amp)
        period = rng.uniform(16.0, 24.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        direction = rng.choice((-1.0, 1.0))
        theta = phase + direction * 2 * math.pi * t / period
        return cy + amp * np.sin(theta), cx + amp * np.cos(theta)
    raise ConfigError(f"unknown motion class {kind!r}")


def render_motion(kind: str, cfg: SynthConfig, rng: np.random.Generator, noise: bool = True) -> Video:
    """Render one sprite video of motion class ``kind`` using draws from ``rng``."""
    n, h, w, s = cfg.frames_per_video, cfg.h, cfg.w, cfg.sprite_size
    background = rng.uniform(0.0, 50.0, size=3)
    colour = rng.uniform(160.0, 255.0, size=3)
    ys, xs = _trajectory(kind, n, h - s, w - s, rng)
    frames = np.empty((n, h, w, 3), dtype=np.float64)
    frames[:] = background
    for i in range(n):
        y0 = int(round(ys[i]))
        x0 = int(round(xs[i]))
        frames[i, y0:y0 + s, x0:x0 + s] = colour
    if noise and cfg.noise_std > 0:
        frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
    return Video(np.clip(np.rint(frames), 0, 255).astype(np.uint8))


def _split_for(j: int, per_class: int, cfg: SynthConfig) -> str:
    n_test = int(round(cfg.test_fraction * per_class))
    n_val = int(round(cfg.val_fraction * per_class))
    n_train = per_class - n_test - n_val
    if j < n_train:
        return "train"
    if j < n_train + n_val:
        return "val"
    return "test"


def synth_corpus(cfg: SynthConfig) -> LabeledCorpus:
    """Generate the labelled sprite corpus.

    Video ``i`` belongs to class ``i // num_videos_per_class`` and draws every
    random quantity from its own stream seeded by ``(seed, i)``, so videos can
    be generated in any order or in parallel with identical results.
    """
    cfg.validate()
    videos, labels, splits = [], [], []
    per = cfg.num_videos_per_class
    for i in range(cfg.num_classes * per):
        k, j = divmod(i, per)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        videos.append(render_motion(MOTION_CLASSES[k], cfg, rng))
        labels.append(k)
        splits.append(_split_for(j, per, cfg))
    return LabeledCorpus(videos, labels, list(MOTION_CLASSES[: cfg.num_classes]), splits)


def frame_mean_baseline(corpus: LabeledCorpus, train_split=("train", "val"), test_split=("test",)) -> float:
    """Accuracy of nearest-centroid classification of single frames by their channel means.

    A corpus that needs temporal reasoning keeps this close to chance.
    """
    def features(sub):
        feats, labs = [], []
        for v, lab in zip(sub.videos, sub.labels):
            m = v.frames.reshape(v.n, -1, v.c).mean(axis=1)
            feats.append(m)
            labs.append(np.full(v.n, lab))
        return np.concatenate(feats), np.concatenate(labs)

    x_tr, y_tr = features(corpus.subset(*train_split))
    x_te, y_te = features(corpus.subset(*test_split))
    classes = np.unique(y_tr)
    centroids = np.stack([x_tr[y_tr == k].mean(axis=0) for k in classes])
    d = ((x_te[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == y_te))

