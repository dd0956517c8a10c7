"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=5e-4, velocity=None, lr_mult=None):
    """One in-place update ``v <- m v - lr (g + wd w); w <- w + v``.

    ``params`` maps names to tensors (or arrays), ``grads`` maps the same names to
    arrays. ``velocity`` is the persistent state dict, created and returned when
    ``None``. ``lr_mult`` optionally scales the learning rate per parameter name.
    """
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        w = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        if g is None:
            continue
        if np.shape(g) != w.shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {w.shape}")
        rate = lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v *= momentum
        v -= rate * (g + weight_decay * w)
        velocity[name] = v
        w += v
    return velocity


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=5e-4, lr_mult=None, clip_norm=None):
        self.params = params
        self.clip_norm = clip_norm
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_mult = dict(lr_mult or {})
        self.velocity = {}

    def step(self, lr: float):
        grads = {k: t.grad for k, t in self.params.items()}
        if self.clip_norm:
            norm = global_norm(grads.values())
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {k: (None if g is None else g * scale) for k, g in grads.items()}
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity, self.lr_mult)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
