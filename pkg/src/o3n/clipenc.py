"""Difference-based clip encoders.

Every encoder maps a clip of ``W`` frames, shaped ``(..., W, h, w, c)``, to a
single ``(..., h, w, c_out)`` tensor:

* ``sum_of_diff``   -- sum over all pairs j > i of (X_j - X_i), a weighted frame sum
* ``dynamic_image`` -- the same sum applied to running-mean smoothed frames
* ``stack_of_diff`` -- consecutive differences stacked along channels

Weights follow the later-minus-earlier convention, so a frame late in the clip
gets a positive coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

ENCODERS = ("sum_of_diff", "dynamic_image", "stack_of_diff")
VAR_FLOOR = 1e-5


@dataclass
class EncodedClip:
    data: np.ndarray
    encoder: str

    @property
    def c_out(self) -> int:
        return self.data.shape[-1]


def sumdiff_weights(W: int) -> np.ndarray:
    t = np.arange(1, W + 1, dtype=np.float64)
    return 2 * t - 1 - W


def harmonic(t: int) -> float:
    return float(sum(1.0 / i for i in range(1, t + 1)))


def dynimg_weights(W: int) -> np.ndarray:
    h_w = harmonic(W)
    return np.array(
        [2 * (W - t + 1) - (W + 1) * (h_w - harmonic(t - 1)) for t in range(1, W + 1)],
        dtype=np.float64,
    )


def smooth_means(frames: np.ndarray) -> np.ndarray:
    """Running means along the time axis (axis -4 for image stacks, 0 for 1-D)."""
    x = np.asarray(frames)
    axis = 0 if x.ndim < 4 else x.ndim - 4
    counts = np.arange(1, x.shape[axis] + 1, dtype=np.float64)
    shape = [1] * x.ndim
    shape[axis] = -1
    out = np.cumsum(x, axis=axis, dtype=np.float64) / counts.reshape(shape)
    return out.astype(x.dtype) if x.dtype.kind == "f" else out


def channel_input_count(encoder: str, W: int, c: int = 3) -> int:
    if encoder == "stack_of_diff":
        return (W - 1) * c
    if encoder in ENCODERS:
        return c
    raise ValueError(f"unknown encoder {encoder!r}")


def _check_clip(frames) -> np.ndarray:
    if isinstance(frames, (list, tuple)):
        try:
            frames = np.stack([np.asarray(f) for f in frames])
        except ValueError as exc:
            raise ShapeError(f"ragged clip frames: {exc}") from None
    x = np.asarray(frames)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    if x.ndim < 4:
        raise ShapeError(f"clip must have shape (..., W, h, w, c), got {x.shape}")
    if x.shape[-4] < 2:
        raise ShapeError("clip needs at least 2 frames")
    return x


def _weighted_sum(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # accumulate in float64, hand back the caller's precision
    return np.einsum("...thwc,t->...hwc", x.astype(np.float64), weights).astype(x.dtype)


def sumdiff_raw(frames) -> np.ndarray:
    x = _check_clip(frames)
    return _weighted_sum(x, sumdiff_weights(x.shape[-4]))


def dynimg_raw(frames) -> np.ndarray:
    x = _check_clip(frames)
    return _weighted_sum(x, dynimg_weights(x.shape[-4]))


def stackdiff_raw(frames) -> np.ndarray:
    x = _check_clip(frames)
    d = np.diff(x, axis=-4)  # (..., W-1, h, w, c)
    lead = d.shape[:-4]
    w1, h, w, c = d.shape[-4:]
    d = np.moveaxis(d, -4, -2)  # (..., h, w, W-1, c)
    return d.reshape(lead + (h, w, w1 * c))


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel zero mean and unit variance; constant channels become 0."""
    mean = x.mean(axis=(-3, -2), keepdims=True)
    var = x.var(axis=(-3, -2), keepdims=True)
    return ((x - mean) / np.sqrt(np.maximum(var, VAR_FLOOR))).astype(x.dtype)


_RAW = {"sum_of_diff": sumdiff_raw, "dynamic_image": dynimg_raw, "stack_of_diff": stackdiff_raw}


def encode_array(frames, encoder: str, standardized: bool = True) -> np.ndarray:
    """Encode one clip ``(W, h, w, c)`` or a batch ``(B, W, h, w, c)``."""
    try:
        raw = _RAW[encoder]
    except KeyError:
        raise ValueError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}") from None
    out = raw(frames)
    return standardize(out) if standardized else out


def encode_sumdiff(clip, standardized: bool = True) -> EncodedClip:
    return EncodedClip(encode_array(_frames_of(clip), "sum_of_diff", standardized), "sum_of_diff")


def encode_dynimg(clip, standardized: bool = True) -> EncodedClip:
    return EncodedClip(encode_array(_frames_of(clip), "dynamic_image", standardized), "dynamic_image")


def encode_stackdiff(clip, standardized: bool = True) -> EncodedClip:
    return EncodedClip(encode_array(_frames_of(clip), "stack_of_diff", standardized), "stack_of_diff")


def encode(clip, encoder: str, standardized: bool = True) -> EncodedClip:
    return EncodedClip(encode_array(_frames_of(clip), encoder, standardized), encoder)


def _frames_of(clip):
    return getattr(clip, "frames", clip)
