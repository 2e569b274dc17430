"""Finite-difference verification of every autograd op.

Tape gradients of the build under test (float32 by default) are compared
against a float64 central-difference oracle evaluated at the same point, so
the oracle's own rounding never masks a backward bug. h=1e-3 for the float32
build (tolerance 1e-2); the float64 build tightens both, h=1e-4 and 1e-5,
since at h=1e-3 the O(h^2) truncation of the differences themselves sits at
the tolerance. Binarize is the one op not checked by differences: its
backward is defined as the straight-through identity, so the check asserts
that contract exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, backward
from .rng import Rng

__all__ = ["OpCheck", "numerical_gradient", "max_rel_error", "run_all",
           "TOL_F32", "TOL_F64", "FD_STEP"]

FD_STEP = 1e-3
FD_STEP_F64 = 1e-4
TOL_F32 = 1e-2
TOL_F64 = 1e-5


@dataclass
class OpCheck:
    name: str
    max_rel_error: float
    tolerance: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numerical_gradient(f: Callable[[], Tensor], param: Tensor,
                       h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. every element."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(param.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-3) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _fd_check(name: str, build: Callable[[], tuple[Callable[[], Tensor], list[Tensor]]],
              dtype, tol: float, h: float) -> OpCheck:
    # tape gradients at the build's precision
    with ag.use_dtype(dtype):
        f, params = build()
        with Tape() as tape:
            loss = f()
            backward(loss, tape)
    # float64 oracle, same seeded values
    with ag.use_dtype(np.float64):
        f64, params64 = build()
        numeric = [numerical_gradient(f64, p, h=h) for p in params64]
    worst = 0.0
    for p, num in zip(params, numeric):
        worst = max(worst, max_rel_error(p.grad, num))
        p.zero_grad()
    return OpCheck(name, worst, tol)


def _weighted_sum(t: Tensor, rng: Rng) -> Tensor:
    w = Tensor(rng.uniform(0.2, 1.0, t.shape))
    return ag.tsum(ag.mul(t, w))


def _make_checks() -> list[tuple[str, Callable]]:
    checks: list[tuple[str, Callable]] = []

    def conv_case():
        rng = Rng(11)
        x = Tensor(rng.normals((2, 3, 6, 6)), requires_grad=True)
        k = Tensor(rng.normals((4, 3, 3, 3)) * 0.4, requires_grad=True)
        return (lambda: _weighted_sum(ag.conv2d(x, k, stride=1, padding=1), Rng(12))), [x, k]

    checks.append(("conv2d", conv_case))

    def conv_strided_case():
        rng = Rng(13)
        x = Tensor(rng.normals((1, 2, 7, 7)), requires_grad=True)
        k = Tensor(rng.normals((3, 2, 3, 3)) * 0.4, requires_grad=True)
        return (lambda: _weighted_sum(ag.conv2d(x, k, stride=2, padding=0), Rng(14))), [x, k]

    checks.append(("conv2d_strided", conv_strided_case))

    def relu_case():
        rng = Rng(21)
        # keep inputs away from the kink at zero
        raw = rng.normals((4, 6))
        raw = np.where(np.abs(raw) < 0.2, raw + np.sign(raw + 1e-9) * 0.3, raw)
        x = Tensor(raw, requires_grad=True)
        return (lambda: _weighted_sum(ag.relu(x), Rng(22))), [x]

    checks.append(("relu", relu_case))

    def pool_case():
        rng = Rng(31)
        # distinct values so the argmax is stable under the FD nudge
        base = rng.uniform(-1, 1, (2, 3, 4, 4))
        base += np.arange(base.size).reshape(base.shape) * 1e-2
        x = Tensor(base, requires_grad=True)
        return (lambda: _weighted_sum(ag.maxpool2d(x, 2), Rng(32))), [x]

    checks.append(("maxpool2d", pool_case))

    def bn_train_case():
        rng = Rng(41)
        x = Tensor(rng.normals((3, 4, 5, 5)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, (4,)), requires_grad=True)
        beta = Tensor(rng.uniform(-0.3, 0.3, (4,)), requires_grad=True)

        def f():
            stats = ag.RunningStats(4)  # fresh stats: f must be repeatable
            return _weighted_sum(ag.batchnorm(x, gamma, beta, stats, train=True), Rng(42))

        return f, [x, gamma, beta]

    checks.append(("batchnorm_train", bn_train_case))

    def bn_eval_case():
        rng = Rng(43)
        x = Tensor(rng.normals((2, 3, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)
        beta = Tensor(rng.uniform(-0.3, 0.3, (3,)), requires_grad=True)
        stats = ag.RunningStats(3)
        stats.mean[:] = rng.uniform(-0.5, 0.5, (3,))
        stats.var[:] = rng.uniform(0.5, 2.0, (3,))
        return (lambda: _weighted_sum(
            ag.batchnorm(x, gamma, beta, stats, train=False), Rng(44))), [x, gamma, beta]

    checks.append(("batchnorm_eval", bn_eval_case))

    def linear_case():
        rng = Rng(51)
        x = Tensor(rng.normals((4, 5)), requires_grad=True)
        w = Tensor(rng.normals((5, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.normals((3,)) * 0.2, requires_grad=True)
        return (lambda: _weighted_sum(ag.linear(x, w, b), Rng(52))), [x, w, b]

    checks.append(("linear", linear_case))

    def ce_case():
        rng = Rng(61)
        logits = Tensor(rng.normals((5, 4)), requires_grad=True)
        labels = np.array([0, 1, 2, 3, 1])
        return (lambda: ag.softmax_cross_entropy(logits, labels)), [logits]

    checks.append(("softmax_cross_entropy", ce_case))

    def scale_case():
        rng = Rng(71)
        x = Tensor(rng.normals((2, 4, 3, 3)), requires_grad=True)
        m = Tensor(rng.uniform(0.1, 1.0, (4,)), requires_grad=True)
        return (lambda: _weighted_sum(ag.channel_scale(x, m), Rng(72))), [x, m]

    checks.append(("channel_scale", scale_case))

    def arithmetic_case():
        rng = Rng(81)
        a = Tensor(rng.uniform(0.2, 1.0, (6,)), requires_grad=True)
        b = Tensor(rng.uniform(0.2, 1.0, (6,)), requires_grad=True)

        def f():
            u = ag.sub(ag.add(a, b), ag.mul(a, b))   # soft union
            r = ag.div(ag.tsum(u), ag.affine(ag.tsum(b), 1.0, 2.0))
            return ag.add(ag.tmean(ag.mul(u, u)), ag.relu(r))

        return f, [a, b]

    checks.append(("elementwise_arithmetic", arithmetic_case))

    def composite_case():
        # two masked conv layers + bn + head: the full layer stack end to end
        rng = Rng(91)
        x = Tensor(rng.normals((2, 2, 6, 6)))
        k1 = Tensor(rng.normals((3, 2, 3, 3)) * 0.5)
        k2 = Tensor(rng.normals((3, 3, 3, 3)) * 0.5)
        s1 = Tensor(rng.uniform(0.05, 0.8, (2,)), requires_grad=True)
        s2 = Tensor(rng.uniform(0.05, 0.8, (3,)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)
        beta = Tensor(np.zeros(3), requires_grad=True)
        w = Tensor(rng.normals((3 * 3 * 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        labels = np.array([0, 2])

        def f():
            stats = ag.RunningStats(3)
            h1 = ag.relu(ag.conv2d(ag.channel_scale(x, s1), k1, padding=1))
            h1 = ag.batchnorm(h1, gamma, beta, stats, train=True)
            h2 = ag.relu(ag.conv2d(ag.channel_scale(h1, s2), k2, padding=1))
            h2 = ag.maxpool2d(h2, 2)
            flat = ag.reshape(h2, (2, 3 * 3 * 3))
            return ag.softmax_cross_entropy(ag.linear(flat, w, b), labels)

        return f, [s1, s2, gamma, beta, w, b]

    checks.append(("masked_net_composite", composite_case))
    return checks


def _binarize_contract() -> OpCheck:
    rng = Rng(101)
    s = Tensor(rng.normals((16,)) * 0.01, requires_grad=True)
    upstream = Tensor(rng.normals((16,)))
    with Tape() as tape:
        b = ag.binarize(s, 0.0)
        loss = ag.tsum(ag.mul(b, upstream))
        backward(loss, tape)
    err = float(np.max(np.abs(s.grad - upstream.data)))
    return OpCheck("binarize_straight_through", err, 1e-12,
                   note="exact identity contract, not finite differences")


def run_all(float64: bool = False) -> list[OpCheck]:
    """Run every op check with the build under test in the given precision."""
    tol = TOL_F64 if float64 else TOL_F32
    h = FD_STEP_F64 if float64 else FD_STEP
    dtype = np.float64 if float64 else np.float32
    results = [_fd_check(name, build, dtype, tol, h)
               for name, build in _make_checks()]
    with ag.use_dtype(dtype):
        results.append(_binarize_contract())
    return results
