"""Dense tensor engine with tape-based reverse-mode differentiation.

Just enough autodiff to train a small GPT deterministically on CPU:
float32 storage, float64 reduction accumulators, a fixed op set, and a
hard no-NaN policy (any non-finite array raises instead of propagating).

The op set is deliberately closed: matmul, add, mul, scalar scale, GELU,
embedding gather, reshape/transpose, row softmax, layer norm, cross
entropy, and a full-sum reduction for tests. Broadcasting is supported
where the model needs it (trailing-dim and size-1 leading dims).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""


class DegenerateRowError(ValueError):
    """Softmax saw a row with every entry masked."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (e.g. non-scalar root)."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced in {where}")


class Tensor:
    """Dense n-d array with optional gradient.

    data is float32 by default; pass a float64 array (or dtype=np.float64)
    to run the whole graph in double precision (used by gradient checks).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        _check_finite(self.data, "Tensor()")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


_active_tape: Optional["Tape"] = None


class Tape:
    """Ordered record of executed ops; replaying it in reverse is backprop.

    Ops append nodes in execution order, which is topological by
    construction, so the reverse walk visits each node exactly once.
    Use as a context manager around the forward pass.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise GradientError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self.nodes.append((out, backward_fn))
        self._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise GradientError(f"backward root must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GradientError("loss was not produced through this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, backward_fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            backward_fn(g, grads)
        for tid, leaf in self._leaves.items():
            g = grads.get(tid)
            if g is None:
                continue
            _check_finite(g, "backward")
            if leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad = leaf.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Free-function alias for Tape.backward."""
    tape.backward(loss)


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    # Never accumulate in place: ops may hand the same array to several
    # inputs (residual adds do), so stored grads must stay immutable.
    tid = id(t)
    if tid in grads:
        grads[tid] = grads[tid] + g
    else:
        grads[tid] = g


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast to reach g.shape from shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _out(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires
    _check_finite(data, name)
    if requires and _active_tape is not None:
        _active_tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batched leading dims; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g, grads):
        if a.requires_grad:
            _accum(grads, a, _reduce_to_shape(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(grads, b, _reduce_to_shape(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _out(data, (a, b), backward_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward_fn(g, grads):
        if a.requires_grad:
            _accum(grads, a, _reduce_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accum(grads, b, _reduce_to_shape(g, b.data.shape))

    return _out(data, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(g, grads):
        if a.requires_grad:
            _accum(grads, a, _reduce_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(grads, b, _reduce_to_shape(g * a.data, b.data.shape))

    return _out(data, (a, b), backward_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def backward_fn(g, grads):
        _accum(grads, a, g * s)

    return _out(data, (a,), backward_fn, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (GPT-2 convention)."""
    xd = x.data
    one = xd.dtype.type(1)
    half = xd.dtype.type(0.5)
    x2 = xd * xd
    inner = x2 * xd.dtype.type(0.044715)
    inner += one
    inner *= xd
    inner *= xd.dtype.type(_GELU_C)
    t = np.tanh(inner)
    data = t + one
    data *= half
    data *= xd

    def backward_fn(g, grads):
        # d/dx [0.5 x (1 + tanh(u))], u = c(x + 0.044715 x^3); x2 cached
        du = x2 * xd.dtype.type(3 * 0.044715)
        du += one
        du *= xd.dtype.type(_GELU_C)
        du *= one - t * t
        du *= xd
        du += t
        du += one
        du *= half
        du *= g
        _accum(grads, x, du)

    return _out(data, (x,), backward_fn, "gelu")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[i] = table[ids[i]]; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    data = table.data[ids]

    def backward_fn(g, grads):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(grads, table, gt)

    return _out(data, (table,), backward_fn, "embedding")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)

    def backward_fn(g, grads):
        _accum(grads, x, g.reshape(x.data.shape))

    return _out(data, (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g, grads):
        _accum(grads, x, np.ascontiguousarray(g.transpose(inverse)))

    return _out(data, (x,), backward_fn, "transpose")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (float64 accumulator), as a scalar Tensor."""
    data = np.asarray(np.sum(x.data, dtype=np.float64)).astype(x.data.dtype)

    def backward_fn(g, grads):
        _accum(grads, x, np.full(x.data.shape, float(g), dtype=x.data.dtype))

    return _out(data, (x,), backward_fn, "tsum")


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability.

    mask is boolean, True = keep (broadcastable against x); masked entries
    come out exactly 0. Row sums hit 1 within 1e-6 thanks to the float64
    denominator. A fully masked row is an error.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with all entries masked")
        safe = np.where(mask, xd, -np.inf)
        m = safe.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd, m) - m), 0.0)
    else:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    probs = (e / denom).astype(xd.dtype)

    def backward_fn(g, grads):
        dot = np.sum(probs * g, axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
        _accum(grads, x, probs * (g - dot))

    return _out(probs, (x,), backward_fn, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each feature vector over the last axis, then affine."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    # E[x^2] - E[x]^2 in float64: cancellation is negligible at 15 digits
    var = np.square(xd).mean(axis=-1, keepdims=True, dtype=np.float64) - np.square(mean)
    inv_std = (1.0 / np.sqrt(np.maximum(var, 0.0) + eps)).astype(xd.dtype)
    xhat = (xd - mean.astype(xd.dtype)) * inv_std
    data = xhat * gain.data + bias.data

    def backward_fn(g, grads):
        if gain.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(grads, gain, np.sum(g * xhat, axis=axes, dtype=np.float64).astype(xd.dtype))
        if bias.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(grads, bias, np.sum(g, axis=axes, dtype=np.float64).astype(xd.dtype))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
            _accum(grads, x, (gx - m1 - xhat * m2) * inv_std)

    return _out(data, (x, gain, bias), backward_fn, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of targets, natural log."""
    ld = logits.data
    targets = np.asarray(targets).reshape(-1)
    n, vocab = ld.shape
    if targets.shape[0] != n:
        raise ValueError(f"{targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target id out of vocabulary range")
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    rows = np.arange(n)
    # loss_i = log(sum exp(l - m)) - (l_target - m); mean in float64
    lse = np.log(denom[:, 0])
    picked = (ld[rows, targets] - m[:, 0]).astype(np.float64)
    loss64 = float(np.mean(lse - picked, dtype=np.float64))
    data = np.asarray(loss64, dtype=ld.dtype)

    def backward_fn(g, grads):
        p = e / denom.astype(ld.dtype)
        p[rows, targets] -= 1.0
        p *= ld.dtype.type(g * (1.0 / n))
        _accum(grads, logits, p)

    return _out(data, (logits,), backward_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    samples: int = 50,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples `samples` coordinates of x; relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|). Run the
    function in float64 for tolerances tighter than ~1e-3.
    """
    x.zero_grad()
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)  # flat view must alias x.data
    rng = np.random.default_rng(seed)
    flat_count = x.data.size
    idx = rng.choice(flat_count, size=min(samples, flat_count), replace=False)
    worst = 0.0
    flat = x.data.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x).data)
        flat[i] = orig - h
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
