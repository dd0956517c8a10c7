"""Odd-one-out question generation from a single video.

Frame indices are 1-based throughout, matching the ``[1, n]`` convention of
the question metadata; frame extraction subtracts one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, VideoTooShort

log = logging.getLogger(__name__)

STRATEGIES = ("consecutive", "random", "constrained_consecutive")


@dataclass
class Clip:
    indices: list
    frames: np.ndarray
    is_odd: bool = False


@dataclass
class Question:
    elements: list
    answer: int
    strategy: str
    source_video_id: object = None

    @property
    def size(self) -> int:
        return len(self.elements)


@dataclass
class SamplerConfig:
    N: int = 5
    W: int = 6
    strategy: str = "random"
    seed: int = 0

    def validate(self):
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.W < 2:
            raise ConfigError("W must be >= 2 (a single frame has no invalid order)")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}; expected one of {STRATEGIES}")


def is_strictly_increasing(indices) -> bool:
    return all(a < b for a, b in zip(indices, indices[1:]))


def window_length(W: int) -> int:
    return math.ceil(1.5 * W)


def min_video_length(W: int, strategy: str) -> int:
    return window_length(W) if strategy == "constrained_consecutive" else W


def extract(v, indices) -> np.ndarray:
    """Frames at 1-based ``indices`` as float32 in [0, 1]."""
    idx = np.asarray(indices, dtype=np.int64) - 1
    return v.frames[idx].astype(np.float32) / np.float32(255.0)


def _require(v, need: int, what: str):
    if v.n < need:
        raise VideoTooShort(f"{what} needs at least {need} frames, video has {v.n}")


def sample_consecutive(v, W: int, rng: np.random.Generator) -> Clip:
    _require(v, W, "consecutive sampling")
    s = int(rng.integers(1, v.n - W + 2))
    indices = list(range(s, s + W))
    return Clip(indices, extract(v, indices), False)


def sample_random_ordered(v, W: int, rng: np.random.Generator) -> Clip:
    _require(v, W, "random sampling")
    indices = sorted(int(i) + 1 for i in rng.choice(v.n, size=W, replace=False))
    return Clip(indices, extract(v, indices), False)


def constrained_window(v, W: int, rng: np.random.Generator) -> tuple:
    """Inclusive 1-based ``(first, last)`` frame range of length ceil(1.5 W)."""
    L = window_length(W)
    _require(v, L, "constrained consecutive sampling")
    first = int(rng.integers(1, v.n - L + 2))
    return first, first + L - 1


def shuffle_out_of_order(indices, rng: np.random.Generator) -> list:
    """Uniformly random permutation of ``indices`` that is not strictly increasing."""
    base = sorted(int(i) for i in indices)
    if len(base) < 2:
        raise ConfigError("cannot put fewer than 2 frames out of order")
    while True:
        perm = [base[i] for i in rng.permutation(len(base))]
        if not is_strictly_increasing(perm):
            return perm


def make_odd_clip(v, W: int, strategy: str, window, rng: np.random.Generator) -> Clip:
    if strategy == "constrained_consecutive":
        if window is None:
            window = constrained_window(v, W, rng)
        first, last = window
        if last - first + 1 < W:
            raise VideoTooShort(f"window {window} shorter than W={W}")
        drawn = rng.choice(np.arange(first, last + 1), size=W, replace=False)
    elif strategy in ("consecutive", "random"):
        _require(v, W, f"{strategy} odd clip")
        drawn = rng.choice(v.n, size=W, replace=False) + 1
    else:
        raise ConfigError(f"unknown sampling strategy {strategy!r}")
    indices = shuffle_out_of_order(drawn, rng)
    return Clip(indices, extract(v, indices), True)


def _even_in_window(v, W: int, window, rng: np.random.Generator) -> Clip:
    first, last = window
    s = int(rng.integers(first, last - W + 2))
    indices = list(range(s, s + W))
    return Clip(indices, extract(v, indices), False)


def build_question(v, cfg: SamplerConfig, rng: np.random.Generator, source_video_id=None) -> Question:
    cfg.validate()
    _require(v, min_video_length(cfg.W, cfg.strategy), f"{cfg.strategy} question")
    window = None
    if cfg.strategy == "consecutive":
        evens = [sample_consecutive(v, cfg.W, rng) for _ in range(cfg.N)]
    elif cfg.strategy == "random":
        evens = [sample_random_ordered(v, cfg.W, rng) for _ in range(cfg.N)]
    else:
        window = constrained_window(v, cfg.W, rng)
        evens = [_even_in_window(v, cfg.W, window, rng) for _ in range(cfg.N)]
    odd = make_odd_clip(v, cfg.W, cfg.strategy, window, rng)
    answer = int(rng.integers(1, cfg.N + 2))
    elements = evens[: answer - 1] + [odd] + evens[answer - 1:]
    if log.isEnabledFor(logging.DEBUG):
        seen = [tuple(c.indices) for c in evens]
        if len(set(seen)) < len(seen):
            log.debug("question from video %s has duplicate even clips", source_video_id)
    return Question(elements, answer, cfg.strategy, source_video_id)

