"""Differentiable layer primitives. Images are NHWC, kernels are (KH, KW, C_in, C_out)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import LabelOutOfRange, ShapeError
from .tensor import Tensor, as_tensor


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data, _parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def total(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _node(x.data * mask, (x,), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (B, in) and ``weight`` (in, out)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(b, oh, ow, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation via im2col."""
    x = as_tensor(x)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and 4-d kernel, got {x.shape}, {kernel.shape}")
    b, h, w, c = x.shape
    kh, kw, kc, o = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.ascontiguousarray(_windows(xp, kh, kw, stride, oh, ow)).reshape(b * oh * ow, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, o)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, oh, ow, o)

    def backward(g):
        g2 = g.reshape(-1, o)
        kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if bias is not None:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(b, oh, ow, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
            x._accumulate(dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward)


def maxpool(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool: expected NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    oh, ow = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool: window {k} larger than input {h}x{w}")
    win = _windows(x.data, k, k, stride, oh, ow).reshape(b, oh, ow, k * k, c)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += g * (arg == idx)
        x._accumulate(dx)

    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: drop with probability ``rate``, scale survivors by 1/(1-rate)."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def backward(g):
        x._accumulate(g * keep)

    return _node(x.data * keep, (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, bounds, axis=axis)):
            t._accumulate(part)

    return _node(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def combine_branches(x: Tensor, coeffs) -> Tensor:
    """``out[b] = sum_k coeffs[k] * x[b, k]`` for ``x`` of shape (B, K, d)."""
    x = as_tensor(x)
    c = np.asarray(coeffs, dtype=x.dtype)
    if x.data.ndim != 3 or c.shape != (x.shape[1],):
        raise ShapeError(f"combine_branches: input {x.shape} vs {c.shape[0]} coefficients")

    def backward(g):
        x._accumulate(c[None, :, None] * g[:, None, :])

    k = c.shape[0]
    if np.array_equal(c, -c[::-1]):
        # antisymmetric weights: pair mirrored branches so equal inputs cancel exactly
        half = k // 2
        diff = x.data[:, k - half:][:, ::-1] - x.data[:, :half]
        return _node(np.einsum("bkd,k->bd", diff, c[::-1][:half]), (x,), backward)
    return _node(np.einsum("bkd,k->bd", x.data, c), (x,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits: Tensor, labels) -> tuple:
    """Mean cross-entropy over the batch. Returns ``(loss, probs)``; labels are 0-based."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_xent: logits must be (B, C), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, ncls = logits.shape
    if labels.shape[0] != bsz:
        raise ShapeError(f"softmax_xent: {labels.shape[0]} labels for batch of {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise LabelOutOfRange(f"labels must lie in [0, {ncls})")
    logp = log_softmax(logits.data)
    probs = np.exp(logp)
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        logits._accumulate(d * (g / bsz))

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward), probs
