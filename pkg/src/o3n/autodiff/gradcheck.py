"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

import numpy as np


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def grad_check(fn, tensors: dict, eps: float = 1e-3, max_coords: int = 40, rng=None, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph from ``tensors`` (float64 :class:`Tensor` objects
    with ``requires_grad``) and returns a scalar tensor. At most ``max_coords``
    randomly chosen coordinates of each tensor are perturbed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors.values():
        t.grad = None
    fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = float(relative_error(analytic[name].reshape(-1)[i], numeric, floor))
            worst = max(worst, err)
    return worst
