"""Dense float64 tensors with taped reverse-mode differentiation.

Implements only the kernels the forecaster needs: matrix products, a
strided 1-D convolution, layer normalization, a numerically safe softmax,
GELU, and a handful of shape and elementwise primitives.  Ops executed
under an active :class:`Tape` are recorded in execution order; `backward`
replays the tape reversed and accumulates gradients additively, so leaves
that feed the loss through several paths get the sum of all contributions.

Gradients are never stored on tensors.  Each `backward` call returns a
fresh gradient list, which means repeated forward passes leave no residue
between optimization steps.

Every op checks its result for NaN/Inf and raises immediately; silent
propagation of non-finite values is treated as a bug in the caller.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands have shapes the op cannot accept."""


class NonFiniteError(FloatingPointError):
    """An op produced (or was handed) NaN or Inf."""


_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tensor:
    """A float64 array plus a differentiation flag.

    Treat instances as immutable: ops return new tensors and never write
    into their inputs.  Optimizer updates happen on flat numpy vectors
    outside the graph (see `optim.adam_step`).
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def param(data) -> Tensor:
    """A leaf tensor that participates in differentiation."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """A leaf tensor treated as a constant (no gradient)."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of executed primitives.

    Used as a context manager; ops run inside the `with` block are
    appended in execution order.  `backward` walks the record in exact
    reverse order, which is always a valid reverse topological order of
    the computation graph.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        self._outer = getattr(_TLS, "tape", None)
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _TLS.tape = self._outer
        return False

    def __len__(self) -> int:
        return len(self._ops)


def _all_finite(data: np.ndarray) -> bool:
    # Fast path: one reduction. A non-finite sum can also mean benign
    # overflow of large finite values, so only the exact check may veto.
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(data.sum()):
            return True
    return bool(np.all(np.isfinite(data)))


def _result(data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    return out


def _emit(out: Tensor, bw: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._ops.append((out, bw))
    return out


def _acc(store: dict, t: Tensor, g: np.ndarray) -> None:
    # Additive accumulation; never mutate a stored array in place.
    if not t.requires_grad:
        return
    key = id(t)
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar `loss` with respect to each leaf in `params`.

    Leaves that did not participate in the loss get an all-zero gradient
    of their own shape.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    store: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, bw in reversed(tape._ops):
        g = store.pop(id(out), None)
        if g is None:
            continue
        bw(g, store)
    return [store.get(id(p), np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad, "add")

    def bw(g, store):
        _acc(store, a, g)
        _acc(store, b, g)

    return _emit(out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = _result(a.data - b.data, a.requires_grad or b.requires_grad, "sub")

    def bw(g, store):
        _acc(store, a, g)
        _acc(store, b, -g)

    return _emit(out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad, "mul")

    def bw(g, store):
        _acc(store, a, g * b.data)
        _acc(store, b, g * a.data)

    return _emit(out, bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale factor is non-finite")
    out = _result(x.data * c, x.requires_grad, "scale")

    def bw(g, store):
        _acc(store, x, g * c)

    return _emit(out, bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a parameter over the trailing axes of `x`.

    `b.shape` must equal `x.shape[-b.ndim:]`; the gradient for `b` sums
    over the leading broadcast axes.  Covers both 1-D biases and the
    positional table added to a batched token grid.
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: {b.shape} does not trail {x.shape}")
    out = _result(x.data + b.data, x.requires_grad or b.requires_grad, "add_bias")
    lead = x.ndim - b.ndim

    def bw(g, store):
        _acc(store, x, g)
        if b.requires_grad:
            gb = g.reshape((-1,) + b.shape).sum(axis=0) if lead else g
            _acc(store, b, gb)

    return _emit(out, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}: {e}") from None
    out = _result(data, x.requires_grad, "reshape")
    orig = x.shape

    def bw(g, store):
        _acc(store, x, g.reshape(orig))

    return _emit(out, bw)


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten to a 1-D tensor."""
    return reshape(x, (-1,))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError("transpose needs at least 2 axes")
    out = _result(np.swapaxes(x.data, -1, -2), x.requires_grad, "transpose")

    def bw(g, store):
        _acc(store, x, np.swapaxes(g, -1, -2))

    return _emit(out, bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _result(data, any(p.requires_grad for p in parts), "concat")
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g, store):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            _acc(store, p, piece)

    return _emit(out, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _result(x.data[idx], x.requires_grad, "slice")

    def bw(g, store):
        full = np.zeros_like(x.data)
        full[idx] = g
        _acc(store, x, full)

    return _emit(out, bw)


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum()), x.requires_grad, "sum")

    def bw(g, store):
        _acc(store, x, np.full(x.data.shape, float(g)))

    return _emit(out, bw)


# ---------------------------------------------------------------------------
# dense kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D operands, a batched 3-D left operand
    against a 2-D right operand, and batched 3-D against 3-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul: batch sizes differ")
    if a.ndim > 3 or b.ndim > 3 or (b.ndim == 3 and a.ndim == 2):
        raise ShapeError(f"matmul: unsupported rank pair {a.ndim}/{b.ndim}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad, "matmul")

    def bw(g, store):
        if a.requires_grad:
            _acc(store, a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and g.ndim == 3:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _acc(store, b, gb)

    return _emit(out, bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    e = erf(x.data * _INV_SQRT2)
    out = _result(0.5 * x.data * (1.0 + e), x.requires_grad, "gelu")

    def bw(g, store):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _acc(store, x, g * (0.5 * (1.0 + e) + x.data * pdf))

    return _emit(out, bw)


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction, so large logits
    cannot overflow."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=-1, keepdims=True)
    out = _result(y, x.requires_grad, "softmax")

    def bw(g, store):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(store, x, y * (g - dot))

    return _emit(out, bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to mean 0 / variance 1, then apply the
    learned affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(
        xhat * gamma.data + beta.data,
        x.requires_grad or gamma.requires_grad or beta.requires_grad,
        "layernorm",
    )

    def bw(g, store):
        if gamma.requires_grad:
            _acc(store, gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _acc(store, beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _acc(store, x, (gx - m1 - xhat * m2) * inv)

    return _emit(out, bw)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution over rows of `x` with end-replication.

    `x` is `[B, L]`, `kernel` is `[D, P]`, `bias` is `[D]`; the output is
    `[B, D, N]` with `N = floor(L / stride)` windows.  When the final
    window would run past the end of the series, the last sample is
    replicated so every row yields exactly N windows.
    """
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be [B, L], got {x.shape}")
    if kernel.ndim != 2:
        raise ShapeError("conv1d kernel must be [D, P]")
    if stride < 1:
        raise ShapeError("conv1d stride must be >= 1")
    batch, length = x.shape
    dim, patch = kernel.shape
    if bias.shape != (dim,):
        raise ShapeError(f"conv1d bias must be ({dim},)")
    if patch > length:
        raise ShapeError(f"conv1d: patch {patch} longer than series {length}")
    n = length // stride
    span = (n - 1) * stride + patch
    if span > length:
        pad = np.repeat(x.data[:, -1:], span - length, axis=1)
        padded = np.concatenate([x.data, pad], axis=1)
    else:
        padded = x.data
    idx = np.arange(n)[:, None] * stride + np.arange(patch)[None, :]
    windows = padded[:, idx]  # [B, N, P]
    data = np.swapaxes(windows @ kernel.data.T, -1, -2) + bias.data[None, :, None]
    out = _result(
        data,
        x.requires_grad or kernel.requires_grad or bias.requires_grad,
        "conv1d",
    )

    def bw(g, store):
        gt = np.swapaxes(g, -1, -2)  # [B, N, D]
        if kernel.requires_grad:
            gk = gt.reshape(-1, dim).T @ windows.reshape(-1, patch)
            _acc(store, kernel, gk)
        if bias.requires_grad:
            _acc(store, bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gw = gt @ kernel.data  # [B, N, P]
            gp = np.zeros_like(padded)
            # window starts are `stride` apart, so for a fixed in-window
            # offset p the touched positions never overlap
            for p in range(patch):
                gp[:, p : p + n * stride : stride] += gw[:, :, p]
            gx = gp[:, :length].copy()
            if span > length:
                gx[:, -1] += gp[:, length:].sum(axis=1)
            _acc(store, x, gx)

    return _emit(out, bw)
