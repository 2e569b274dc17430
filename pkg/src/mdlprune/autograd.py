"""Reverse-mode automatic differentiation over dense numpy tensors.

The engine is define-by-run: every differentiable operation executed while a
:class:`Tape` is active appends a record (inputs, output, backward closure) to
that tape. ``backward(loss, tape)`` replays the records in reverse, visiting
each exactly once, and accumulates gradients into ``Tensor.grad``.

Scope is deliberately small: the ops below are exactly what a masked CNN with
per-channel switches needs. There is no general broadcasting (bias addition in
``linear`` is the one exception); any other shape mismatch is a hard error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "use_dtype",
    "default_dtype",
    "conv2d",
    "relu",
    "maxpool2d",
    "RunningStats",
    "batchnorm",
    "linear",
    "softmax_cross_entropy",
    "binarize",
    "channel_scale",
    "reshape",
    "concat",
    "tsum",
    "tmean",
    "affine",
    "add",
    "sub",
    "mul",
    "div",
]

_DEFAULT_DTYPE = np.float32

# Batch-norm constants. The epsilon guards zero-variance channels; the
# momentum is the fraction of the batch statistic blended into the running
# statistic each training step.
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default float type (float64 tightens gradient
    checks; everything else runs in float32)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """Dense n-dimensional float array with an optional gradient buffer.

    ``data`` is a contiguous numpy array in the current default dtype.
    ``grad`` stays ``None`` until a backward pass reaches the tensor; repeated
    backward passes accumulate into it (they are never implicitly zeroed).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are always contiguous
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            # own the buffer: g may alias an upstream gradient
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small arithmetic surface used by the loss code. Tensor operands must
    # match shapes exactly; python scalars are allowed.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return affine(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        return affine(self, -1.0, 0.0)


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of operations for one forward pass.

    A tape is rebuilt per forward pass: enter it as a context manager, run the
    forward computation, call :func:`backward`, and let it go out of scope.
    Records are kept after backward so a second replay doubles gradients
    exactly; ``clear()`` drops them explicitly.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_OpRecord] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


def _active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_OpRecord(name, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape):
    """Propagate d(loss)/d(tensor) to every tensor reachable from ``loss``.

    Visits each recorded operation at most once, in reverse execution order.
    Per-pass gradients are staged in a scratch map and flushed into
    ``Tensor.grad`` at the end, so calling backward twice on the same tape
    doubles every gradient exactly.
    """
    if loss.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    stage: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = stage.get(id(rec.output))
        if g is None:
            continue
        input_grads = rec.backward_fn(g)
        for t, ig in zip(rec.inputs, input_grads):
            if ig is None:
                continue
            tid = id(t)
            if tid in stage:
                stage[tid] = stage[tid] + ig
            else:
                stage[tid] = ig
                holders[tid] = t
    for tid, g in stage.items():
        t = holders[tid]
        if t.requires_grad:
            t.accumulate_grad(np.asarray(g).reshape(t.shape))


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(
            f"convolution output collapses: input {size}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride))
    return windows.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = xshape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def _conv2d_grad_kernel(g2, cols, kshape):
    # g2 (N, C_out, L), cols (N, C*kh*kw, L)
    return np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kshape)


def _conv2d_grad_input(g2, kmat, xshape, kh, kw, stride, padding, oh, ow):
    dcols = np.matmul(kmat.T, g2)
    return _col2im(dcols, xshape, kh, kw, stride, padding, oh, ow)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) input with (C_out,C,kh,kw) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    n, c, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    if c != c_k:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {c_k}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(c_out, c_k * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, c_out, oh, ow)

    def back(g):
        g2 = g.reshape(n, c_out, oh * ow)
        dk = _conv2d_grad_kernel(g2, cols, kernel.shape) if kernel.requires_grad else None
        dx = (_conv2d_grad_input(g2, kmat, x.shape, kh, kw, stride, padding, oh, ow)
              if x.requires_grad else None)
        return dx, dk

    return _emit("conv2d", (x, kernel), out, back)


# ---------------------------------------------------------------------------
# pointwise / pooling


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0), back)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by ``size``."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    tiles = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.ascontiguousarray(tiles).reshape(n, c, oh, ow, size * size)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def back(g):
        dt = np.zeros((n, c, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(dt, idx[..., None], g[..., None], axis=-1)
        dt = dt.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dt).reshape(n, c, h, w),)

    return _emit("maxpool2d", (x,), out, back)


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm (not taped)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=None):
        dt = dtype or _DEFAULT_DTYPE
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)


def batchnorm(x: Tensor, gamma: Tensor, beta_bn: Tensor, running: RunningStats,
              train: bool) -> Tensor:
    """Per-channel normalization of a (N,C,H,W) tensor.

    Train mode normalizes with batch statistics and folds them into
    ``running``; eval mode uses the stored statistics and mutates nothing.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta_bn.shape != (c,):
        raise ValueError(
            f"batchnorm parameter length {gamma.shape}/{beta_bn.shape} != channels {c}")
    axes = (0, 2, 3)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = n * h * w
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running.mean[:] = (1 - BN_MOMENTUM) * running.mean + BN_MOMENTUM * mean
        running.var[:] = (1 - BN_MOMENTUM) * running.var + BN_MOMENTUM * unbiased
    else:
        mean = running.mean
        var = running.var
    istd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * istd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta_bn.data[None, :, None, None]

    def back(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta_bn.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if train:
                r = n * h * w
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                dx = (istd[None, :, None, None] / r) * (
                    r * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            else:
                dx = dxhat * istd[None, :, None, None]
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta_bn), out, back)


# ---------------------------------------------------------------------------
# affine head / loss


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map (N,F) @ (F,K) + (K,); the bias row-broadcast is the single
    broadcasting rule in the engine."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear expects 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(
            f"linear dimension mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data + b.data

    def back(g):
        dx = g @ w.data.T if x.requires_grad else None
        dw = x.data.T @ g if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return _emit("linear", (x, w, b), out, back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class; max-subtracted for
    stability."""
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be (N,K), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(n), labels] - np.log(exps.sum(axis=1)))
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), out, back)


# ---------------------------------------------------------------------------
# mask machinery


def binarize(s: Tensor, tau: float = 0.0) -> Tensor:
    """Threshold switches to {0,1}; backward is the straight-through identity
    (the threshold is replaced by the identity on the way back)."""
    out = (s.data > tau).astype(s.dtype)

    def back(g):
        return (g,)

    return _emit("binarize", (s,), out, back)


def channel_scale(x: Tensor, m: Tensor) -> Tensor:
    """Scale each input channel of (N,C,H,W) by the length-C vector ``m``."""
    n, c, h, w = x.shape
    if m.shape != (c,):
        raise ValueError(f"channel_scale: mask length {m.shape} != channels {c}")
    out = x.data * m.data[None, :, None, None]

    def back(g):
        dx = g * m.data[None, :, None, None] if x.requires_grad else None
        dm = (g * x.data).sum(axis=(0, 2, 3)) if m.requires_grad else None
        return dx, dm

    return _emit("channel_scale", (x, m), out, back)


# ---------------------------------------------------------------------------
# shape / reduction / arithmetic


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, back)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-d tensors."""
    for p in parts:
        if p.data.ndim != 1:
            raise ValueError(f"concat expects 1-d tensors, got shape {p.shape}")
    sizes = [p.size for p in parts]
    out = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat", tuple(parts), out, back)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _emit("sum", (x,), out, back)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _emit("mean", (x,), out, back)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """Elementwise ``scale * x + shift`` with python-scalar coefficients."""
    out = x.data * scale + shift

    def back(g):
        return (g * scale,)

    return _emit("affine", (x,), np.asarray(out, dtype=x.dtype), back)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def back(g):
        return g, g

    return _emit("add", (a, b), a.data + b.data, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def back(g):
        return g, -g

    return _emit("sub", (a, b), a.data - b.data, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def back(g):
        da = g * b.data if a.requires_grad else None
        db = g * a.data if b.requires_grad else None
        return da, db

    return _emit("mul", (a, b), a.data * b.data, back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data

    def back(g):
        da = g / b.data if a.requires_grad else None
        db = -g * a.data / (b.data * b.data) if b.requires_grad else None
        return da, db

    return _emit("div", (a, b), out, back)
