"""SGD-with-momentum and Adam steps over explicit parameter lists.

Both optimizers mutate ``Tensor.data`` in place and keep their slot buffers in
plain state objects, so trainer state can be checkpointed or compared across
runs without touching the autograd machinery.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor

__all__ = ["SgdState", "AdamState", "sgd_momentum_step", "adam_step"]


class SgdState:
    def __init__(self, params: Sequence[Tensor]):
        self.velocity = [np.zeros_like(p.data) for p in params]


class AdamState:
    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def _check(params, grads, buffers, name):
    if not (len(params) == len(grads) == len(buffers)):
        raise ValueError(f"{name}: params/grads/state length mismatch")
    for p, g, b in zip(params, grads, buffers):
        if g.shape != p.data.shape or b.shape != p.data.shape:
            raise ValueError(f"{name}: buffer shape mismatch for param {p.shape}")


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                      state: SgdState, lr: float, momentum: float):
    """v <- momentum*v + g ; p <- p - lr*v."""
    _check(params, grads, state.velocity, "sgd_momentum_step")
    for p, g, v in zip(params, grads, state.velocity):
        v *= momentum
        v += g
        p.data -= lr * v


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Standard Adam with bias correction; one shared step counter."""
    _check(params, grads, state.m, "adam_step")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
