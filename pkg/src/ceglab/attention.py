"""Attention kernels, causal/sparse masks, and rotary embeddings.

Masks are boolean [n, n] arrays: row = query position, column = key
position, True = may attend. Kernels accept Q of shape [..., n, d] and
K/V of the same shape or with a size-1 head-group axis (the MQA layout),
and are differentiable through the tape engine.

Two kernels compute the same function:
  * attention_naive materializes the [n, n] score matrix and saves the
    softmax for backward.
  * attention_blocked streams over key/value blocks keeping a running
    row max and denominator, never materializing the score matrix, and
    recomputes per-block scores in backward from the saved log-sum-exp.
    Fully-masked blocks are skipped, which is where the causal-mask
    speedup comes from.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import DegenerateRowError, Tensor, _accum, _out, _reduce_to_shape


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def causal_mask(n: int) -> np.ndarray:
    """Dense causal mask: every query sees itself and everything before."""
    return np.tril(np.ones((n, n), dtype=bool))


def strided_sparse_mask(n: int, l: int) -> np.ndarray:
    """Local window of width l plus every l-th previous position, causal.

    mask[i][j] is True iff j <= i and (i - j < l or (i - j) % l == 0).
    Nonzeros are bounded by n * (l + ceil(n/l)).
    """
    if not 1 <= l <= n:
        raise ValueError(f"stride l={l} outside [1, {n}]")
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    dist = i - j
    return (dist >= 0) & ((dist < l) | (dist % l == 0))


def validate_mask(mask: np.ndarray) -> None:
    """Check the causality and self-attendance invariants."""
    n = mask.shape[0]
    if mask.shape != (n, n):
        raise ValueError(f"mask must be square, got {mask.shape}")
    if np.triu(mask, k=1).any():
        raise ValueError("mask allows attention to future positions")
    if not mask.diagonal().all():
        raise ValueError("mask must allow self-attendance")


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------


def rope_tables(positions: np.ndarray, d: int, theta_base: float, dtype=np.float32):
    """cos/sin tables [len(positions), d/2]; pair k rotates by pos * base^(-2k/d)."""
    if d % 2 != 0:
        raise ValueError(f"rotary embedding needs an even head dim, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = theta_base ** (-2.0 * np.arange(d // 2) / d)
    angles = positions[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2k, 2k+1) of x[..., n, d] by position angles.

    Pure rotation: no parameters, norm-preserving per pair. Backward is the
    inverse rotation (same tables with sin negated).
    """
    def rotate(arr, c, s):
        pairs = arr.reshape(arr.shape[:-1] + (arr.shape[-1] // 2, 2))
        even, odd = pairs[..., 0], pairs[..., 1]
        out = np.empty_like(pairs)
        out[..., 0] = even * c - odd * s
        out[..., 1] = even * s + odd * c
        return out.reshape(arr.shape)

    data = rotate(x.data, cos, sin)

    def backward_fn(g, grads):
        _accum(grads, x, rotate(g, cos, -sin))

    return _out(data, (x,), backward_fn, "rope_rotate")


def apply_rope(x: Tensor, positions: np.ndarray, theta_base: float = 10000.0) -> Tensor:
    """Rotary embedding for x[..., n, d] at the given integer positions."""
    d = x.data.shape[-1]
    cos, sin = rope_tables(positions, d, theta_base, dtype=x.data.dtype)
    return rope_rotate(x, cos, sin)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Additive mask value: large enough that exp(s + NEG - rowmax) underflows to
# an exact 0.0 for any realistic score, small enough not to overflow float32.
_MASK_NEG = -1.0e30


def _check_kernel_shapes(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> int:
    n, d = q.data.shape[-2:]
    if k.data.shape[-2:] != (n, d) or v.data.shape[-2:] != (n, d):
        raise ValueError(f"Q/K/V trailing dims disagree: {q.shape} {k.shape} {v.shape}")
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match n={n}")
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("attention mask has a fully masked query row")
    return d


def _additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    add = np.zeros(mask.shape, dtype=dtype)
    add[~mask] = _MASK_NEG
    return add


def attention_naive(q, k, v, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d), masked) V with the full score matrix."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    n = q.data.shape[-2]
    if mask is None:
        mask = causal_mask(n)
    d = _check_kernel_shapes(q, k, v, mask)
    dt = q.data.dtype
    inv_scale = dt.type(1.0 / math.sqrt(d))

    scores = q.data @ np.swapaxes(k.data, -1, -2)
    scores *= inv_scale
    scores += _additive_mask(mask, dt)
    m = scores.max(axis=-1, keepdims=True)
    scores -= m
    probs = np.exp(scores)  # masked entries underflow to exactly 0.0
    denom = probs.sum(axis=-1, keepdims=True, dtype=np.float64)
    probs /= denom.astype(dt)
    data = probs @ v.data

    def backward_fn(g, grads):
        dp = g @ np.swapaxes(v.data, -1, -2)
        dot = np.sum(probs * dp, axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        dp -= dot
        dp *= probs
        dp *= inv_scale
        ds = dp
        if q.requires_grad:
            _accum(grads, q, _reduce_to_shape(ds @ k.data, q.data.shape))
        if k.requires_grad:
            _accum(grads, k, _reduce_to_shape(np.swapaxes(ds, -1, -2) @ q.data, k.data.shape))
        if v.requires_grad:
            _accum(grads, v, _reduce_to_shape(np.swapaxes(probs, -1, -2) @ g, v.data.shape))

    return _out(data, (q, k, v), backward_fn, "attention_naive")


def _blocked_forward(qd, kd, vd, mask, block_rows, block_cols, inv_scale):
    """Online-softmax streaming pass. Returns (out, lse) without any [n, n] array.

    Running max m and probabilities stay in working precision; the rescaled
    accumulator and denominator are float64 (the reductions). Rows with no
    visible key yet carry mass near exp(-1e30), which the first real block
    wipes through a zero rescale factor; mask validity (self-attendance)
    guarantees every row gets a real block eventually.
    """
    n = qd.shape[-2]
    dt = qd.dtype
    batch = np.broadcast_shapes(qd.shape[:-2], kd.shape[:-2])
    out = np.empty(batch + qd.shape[-2:], dtype=dt)
    lse = np.empty(batch + (n,), dtype=dt)
    madd = _additive_mask(mask, dt)

    for r0 in range(0, n, block_rows):
        r1 = min(r0 + block_rows, n)
        q_blk = qd[..., r0:r1, :]
        m = np.full(batch + (r1 - r0,), _MASK_NEG, dtype=dt)
        denom = np.zeros(batch + (r1 - r0,), dtype=np.float64)
        acc = np.zeros(batch + (r1 - r0, qd.shape[-1]), dtype=np.float64)
        for c0 in range(0, n, block_cols):
            c1 = min(c0 + block_cols, n)
            if not mask[r0:r1, c0:c1].any():
                continue
            s = q_blk @ np.swapaxes(kd[..., c0:c1, :], -1, -2)
            s *= inv_scale
            s += madd[r0:r1, c0:c1]
            m_new = np.maximum(m, s.max(axis=-1))
            alpha = np.exp(m - m_new)
            s -= m_new[..., None]
            p = np.exp(s)  # masked entries underflow to exactly 0.0
            acc *= alpha[..., None]
            acc += p @ vd[..., c0:c1, :]
            denom *= alpha
            denom += p.sum(axis=-1, dtype=np.float64)
            m = m_new
        if not (denom > 0).all():
            raise DegenerateRowError("attention mask has a fully masked query row")
        np.divide(acc, denom[..., None], out=acc)
        out[..., r0:r1, :] = acc
        lse[..., r0:r1] = m + np.log(denom).astype(dt)
    return out, lse


def attention_blocked(q, k, v, mask: Optional[np.ndarray] = None,
                      block_rows: int = 64, block_cols: int = 64) -> Tensor:
    """Blocked attention: equals attention_naive within 1e-5 max abs diff.

    Streams key/value blocks with a running max and denominator; backward
    recomputes per-block probabilities from the saved log-sum-exp, so peak
    score memory is O(n * block_cols) per head.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    n = q.data.shape[-2]
    if mask is None:
        mask = causal_mask(n)
    d = _check_kernel_shapes(q, k, v, mask)
    if block_rows < 1 or block_cols < 1:
        raise ValueError("block sizes must be >= 1")
    inv_scale = 1.0 / math.sqrt(d)

    out_data, lse = _blocked_forward(q.data, k.data, v.data, mask, block_rows, block_cols, inv_scale)

    def backward_fn(g, grads):
        qd, kd, vd = q.data, k.data, v.data
        dt = qd.dtype
        madd = _additive_mask(mask, dt)
        delta = np.sum(g * out_data, axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        dq = np.zeros(out_data.shape, dtype=dt)
        dk = np.zeros(np.broadcast_shapes(kd.shape, out_data.shape), dtype=dt)
        dv = np.zeros_like(dk)
        scale = dt.type(inv_scale)
        for c0 in range(0, n, block_cols):
            c1 = min(c0 + block_cols, n)
            if not mask[:, c0:c1].any():
                continue
            k_blk = kd[..., c0:c1, :]
            s = qd @ np.swapaxes(k_blk, -1, -2)
            s *= scale
            s += madd[:, c0:c1]
            s -= lse[..., None]
            p = np.exp(s)  # recomputed block probabilities, masked exactly 0
            dv[..., c0:c1, :] += np.swapaxes(p, -1, -2) @ g
            dp = g @ np.swapaxes(vd[..., c0:c1, :], -1, -2)
            dp -= delta
            dp *= p
            dp *= scale
            ds = dp
            dq += ds @ k_blk
            dk[..., c0:c1, :] += np.swapaxes(ds, -1, -2) @ qd
        if q.requires_grad:
            _accum(grads, q, _reduce_to_shape(dq, qd.shape))
        if k.requires_grad:
            _accum(grads, k, _reduce_to_shape(dk, kd.shape))
        if v.requires_grad:
            _accum(grads, v, _reduce_to_shape(dv, vd.shape))

    return _out(out_data, (q, k, v), backward_fn, "attention_blocked")
