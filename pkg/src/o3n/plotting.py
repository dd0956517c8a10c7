"""Figures and raw images written next to the CSV outputs.

Matplotlib runs on the Agg backend; nothing here opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoError  # noqa: E402

MID_GREY = 128


def rescale_u8(x: np.ndarray) -> np.ndarray:
    """Min-max rescale to 0..255; a constant array becomes mid-grey."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12:
        return np.full(x.shape, MID_GREY, dtype=np.uint8)
    return np.rint((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pnm(img: np.ndarray, path) -> Path:
    """Binary PGM for (h, w) or (h, w, 1); PPM for (h, w, 3). Input must be uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("write_pnm expects uint8 pixels")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    path = Path(path)
    try:
        path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc
    return path


def read_pnm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    magic, w, h, maxval, data = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    c = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data[: w * h * c], dtype=np.uint8)
    return arr.reshape(h, w, c) if c == 3 else arr.reshape(h, w)


def channel_blocks(encoded: np.ndarray) -> list:
    """Split an (h, w, 3k) tensor into k RGB blocks."""
    c = encoded.shape[-1]
    if c % 3:
        raise ValueError(f"channel count {c} is not a multiple of 3")
    return [encoded[..., 3 * i:3 * i + 3] for i in range(c // 3)]


def reduce_depth(kernel: np.ndarray, groups: int = 3) -> np.ndarray:
    """Average contiguous groups of input depths so a (kh, kw, C, O) kernel shows as RGB."""
    kh, kw, c, o = kernel.shape
    if c == groups:
        return kernel
    bounds = np.linspace(0, c, groups + 1).round().astype(int)
    return np.stack([kernel[:, :, bounds[g]:max(bounds[g + 1], bounds[g] + 1)].mean(axis=2) for g in range(groups)], axis=2)


def grid_shape(n: int) -> tuple:
    rows = math.ceil(math.sqrt(n))
    return rows, math.ceil(n / rows)


def filter_grid(kernel: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile every output filter of a first-layer kernel into one uint8 RGB image."""
    k = reduce_depth(np.asarray(kernel, dtype=np.float64))
    kh, kw, _, n = k.shape
    rows, cols = grid_shape(n)
    img = np.zeros((rows * (kh + pad) + pad, cols * (kw + pad) + pad, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (kh + pad), pad + c * (kw + pad)
        img[y:y + kh, x:x + kw] = rescale_u8(k[:, :, :, i])
    return img


def save_filter_figure(kernel: np.ndarray, path, title: str = "first-layer filters") -> Path:
    img = filter_grid(kernel)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(img, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    return _save(fig, path)


def save_encoding_figure(blocks: list, path, title: str = "") -> Path:
    fig, axes = plt.subplots(1, len(blocks), figsize=(1.6 * len(blocks) + 0.4, 2.0), squeeze=False)
    for i, (ax, b) in enumerate(zip(axes[0], blocks)):
        ax.imshow(rescale_u8(b), interpolation="nearest")
        ax.set_title(f"block {i + 1}", fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def save_training_curves(rows, path, title: str = "") -> Path:
    """Loss and accuracy per epoch for each phase in ``(epoch, phase, loss, acc, lr)`` rows."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3))
    for phase in sorted({r[1] for r in rows}):
        sel = [r for r in rows if r[1] == phase]
        ep = [r[0] for r in sel]
        ax_l.plot(ep, [r[2] for r in sel], label=phase)
        ax_a.plot(ep, [r[3] for r in sel], label=phase)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1)
    ax_a.legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def save_confusion_figure(confusion: np.ndarray, class_names, path, title: str = "") -> Path:
    conf = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(class_names)), class_names, fontsize=7)
    for (i, j), v in np.ndenumerate(conf):
        ax.text(j, i, int(v), ha="center", va="center", fontsize=7,
                color="white" if v > conf.max() / 2 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        fig.savefig(path, dpi=120, metadata={"Software": None})
    except OSError as exc:
        raise IoError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path
