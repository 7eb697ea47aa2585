"""GPT-style decoder with independently toggleable architecture variants.

Every mechanism under study is a config switch: positional scheme
(learned absolute / sinusoidal / rotary), normalization (none /
pre-norm LayerNorm), attention pattern (dense causal / strided sparse),
attention kernel (naive / blocked online-softmax), and the number of
key/value heads (MQA when n_kv_head < n_head).

Linear layers carry no biases, and the output head is untied from the
token embedding, so parameter-count deltas between variants are exact
and easy to enumerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (
    attention_blocked,
    attention_naive,
    causal_mask,
    rope_rotate,
    rope_tables,
    strided_sparse_mask,
)
from .tensor import Tensor


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


class ContractError(ValueError):
    """Forward-pass precondition violated (sequence length, token range)."""


POS_SCHEMES = ("learned_absolute", "sinusoidal", "rope")
NORM_SCHEMES = ("none", "layer_norm")
ATTN_PATTERNS = ("dense", "strided_sparse")
ATTN_KERNELS = ("naive", "blocked")


@dataclass
class ModelConfig:
    n_layer: int
    n_head: int
    d_model: int
    vocab_size: int
    context_len: int
    n_kv_head: int = 0       # 0 -> n_head (standard MHA); 1 is pure MQA
    d_ff: int = 0            # 0 -> 4 * d_model
    pos_scheme: str = "learned_absolute"
    rope_theta: float = 10000.0
    norm_scheme: str = "none"
    attn_pattern: str = "dense"
    sparse_stride: int = 0   # 0 -> ceil(sqrt(context_len))
    attn_kernel: str = "naive"
    block_rows: int = 64
    block_cols: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_kv_head == 0:
            self.n_kv_head = self.n_head
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.sparse_stride == 0:
            self.sparse_stride = math.ceil(math.sqrt(self.context_len))
        self.validate()

    def validate(self) -> None:
        if min(self.n_layer, 0) < 0 or min(self.n_head, self.d_model, self.vocab_size,
                                           self.context_len, self.d_ff) < 1:
            raise ConfigError("dimensions must be positive (n_layer may be 0)")
        if self.d_model % self.n_head != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_head={self.n_head}")
        if not 1 <= self.n_kv_head <= self.n_head:
            raise ConfigError(f"n_kv_head={self.n_kv_head} outside [1, {self.n_head}]")
        if self.n_head % self.n_kv_head != 0:
            raise ConfigError(f"n_head={self.n_head} not divisible by n_kv_head={self.n_kv_head}")
        if self.pos_scheme not in POS_SCHEMES:
            raise ConfigError(f"unknown pos_scheme {self.pos_scheme!r}")
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigError(f"unknown norm_scheme {self.norm_scheme!r}")
        if self.attn_pattern not in ATTN_PATTERNS:
            raise ConfigError(f"unknown attn_pattern {self.attn_pattern!r}")
        if self.attn_kernel not in ATTN_KERNELS:
            raise ConfigError(f"unknown attn_kernel {self.attn_kernel!r}")
        if self.pos_scheme == "rope" and (self.d_model // self.n_head) % 2 != 0:
            raise ConfigError("rope needs an even per-head dimension")
        if self.attn_pattern == "strided_sparse" and not 1 <= self.sparse_stride <= self.context_len:
            raise ConfigError(f"sparse_stride={self.sparse_stride} outside [1, {self.context_len}]")
        if self.attn_kernel == "blocked" and (self.block_rows < 1 or self.block_cols < 1):
            raise ConfigError("block sizes must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Named parameter tensors in deterministic construction order."""
    d, d_ff, v = config.d_model, config.d_ff, config.vocab_size
    kv_width = config.n_kv_head * config.d_head
    norm = config.norm_scheme == "layer_norm"
    shapes: dict[str, tuple] = {"wte": (v, d)}
    if config.pos_scheme == "learned_absolute":
        shapes["wpe"] = (config.context_len, d)
    for i in range(config.n_layer):
        if norm:
            shapes[f"h{i}.ln1.g"] = (d,)
            shapes[f"h{i}.ln1.b"] = (d,)
        shapes[f"h{i}.attn.wq"] = (d, d)
        shapes[f"h{i}.attn.wk"] = (d, kv_width)
        shapes[f"h{i}.attn.wv"] = (d, kv_width)
        shapes[f"h{i}.attn.wo"] = (d, d)
        if norm:
            shapes[f"h{i}.ln2.g"] = (d,)
            shapes[f"h{i}.ln2.b"] = (d,)
        shapes[f"h{i}.mlp.w1"] = (d, d_ff)
        shapes[f"h{i}.mlp.w2"] = (d_ff, d)
    if norm:
        shapes["lnf.g"] = (d,)
        shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, v)
    return shapes


def param_count(config: ModelConfig) -> tuple[int, int]:
    """(total, active_per_token) parameter counts, embeddings included.

    Every variant here is dense (no conditional routing), so active equals
    total; both are returned to keep the cost model explicit about it.
    """
    total = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    return total, total


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    mask: np.ndarray = field(repr=False)
    rope_cos: Optional[np.ndarray] = field(default=None, repr=False)
    rope_sin: Optional[np.ndarray] = field(default=None, repr=False)
    sin_table: Optional[np.ndarray] = field(default=None, repr=False)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _init_array(name: str, shape: tuple, rng: np.random.Generator, config: ModelConfig, dtype):
    if name.endswith(".g"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".b"):
        return np.zeros(shape, dtype=dtype)
    std = 0.02
    if name.endswith(("attn.wo", "mlp.w2")) and config.n_layer > 0:
        std = 0.02 / math.sqrt(2.0 * config.n_layer)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Initialize parameters and static buffers deterministically from seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {
        name: Tensor(_init_array(name, shape, rng, config, dtype), requires_grad=True, dtype=dtype)
        for name, shape in parameter_shapes(config).items()
    }
    n = config.context_len
    if config.attn_pattern == "strided_sparse":
        mask = strided_sparse_mask(n, config.sparse_stride)
    else:
        mask = causal_mask(n)
    rope_cos = rope_sin = sin_table = None
    if config.pos_scheme == "rope":
        rope_cos, rope_sin = rope_tables(np.arange(n), config.d_head, config.rope_theta, dtype)
    elif config.pos_scheme == "sinusoidal":
        sin_table = sinusoidal_table(n, config.d_model, dtype)
    return Model(config=config, params=params, mask=mask,
                 rope_cos=rope_cos, rope_sin=rope_sin, sin_table=sin_table)


def sinusoidal_table(n: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table: even channels sine, odd channels cosine."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    k = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / (10000.0 ** (2.0 * k / d_model))
    table = np.empty((n, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


def project_qkv(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                n_head: int, n_kv_head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Project one sequence [n, d_model] to per-head Q/K/V.

    Returns Q [n_head, n, d_head], K and V [n_kv_head, n, d_head]; with
    n_kv_head == 1 every query head reads the same K/V (pure MQA).
    """
    n, d_model = x.data.shape
    d_head = d_model // n_head
    q = T.transpose(T.reshape(T.matmul(x, wq), (n, n_head, d_head)), (1, 0, 2))
    k = T.transpose(T.reshape(T.matmul(x, wk), (n, n_kv_head, d_head)), (1, 0, 2))
    v = T.transpose(T.reshape(T.matmul(x, wv), (n, n_kv_head, d_head)), (1, 0, 2))
    return q, k, v


def _attend(model: Model, x_norm: Tensor, layer: int, batch: int, n: int) -> Tensor:
    """Multi-head attention over the flattened [batch*n, d_model] stream."""
    cfg = model.config
    p = model.params
    h, hkv, dh = cfg.n_head, cfg.n_kv_head, cfg.d_head
    group = h // hkv

    q = T.matmul(x_norm, p[f"h{layer}.attn.wq"])
    k = T.matmul(x_norm, p[f"h{layer}.attn.wk"])
    v = T.matmul(x_norm, p[f"h{layer}.attn.wv"])
    # [batch*n, width] -> [batch, heads, n, d_head]
    q = T.transpose(T.reshape(q, (batch, n, h, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (batch, n, hkv, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (batch, n, hkv, dh)), (0, 2, 1, 3))

    if cfg.pos_scheme == "rope":
        cos, sin = model.rope_cos[:n], model.rope_sin[:n]
        q = rope_rotate(q, cos, sin)
        k = rope_rotate(k, cos, sin)

    # group query heads against shared K/V: [batch, hkv, group, n, d_head]
    q = T.reshape(q, (batch, hkv, group, n, dh))
    k = T.reshape(k, (batch, hkv, 1, n, dh))
    v = T.reshape(v, (batch, hkv, 1, n, dh))

    mask = model.mask[:n, :n]
    if cfg.attn_kernel == "blocked":
        ctx = attention_blocked(q, k, v, mask, cfg.block_rows, cfg.block_cols)
    else:
        ctx = attention_naive(q, k, v, mask)

    ctx = T.reshape(T.transpose(T.reshape(ctx, (batch, h, n, dh)), (0, 2, 1, 3)), (batch * n, h * dh))
    return T.matmul(ctx, p[f"h{layer}.attn.wo"])


def forward(model: Model, tokens: np.ndarray) -> Tensor:
    """Logits [batch, seq, vocab] for integer tokens [batch, seq].

    Pre-norm residual blocks when layer_norm is on, a bare residual stream
    otherwise; causal masking is always enforced by the attention mask.
    """
    cfg = model.config
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    batch, n = tokens.shape
    if n > cfg.context_len:
        raise ContractError(f"sequence length {n} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError("token id out of vocabulary range")

    flat = tokens.reshape(-1)
    x = T.embedding(p["wte"], flat)
    if cfg.pos_scheme == "learned_absolute":
        pos_ids = np.tile(np.arange(n), batch)
        x = T.add(x, T.embedding(p["wpe"], pos_ids))
    elif cfg.pos_scheme == "sinusoidal":
        table = np.tile(model.sin_table[:n], (batch, 1))
        x = T.add(x, Tensor(table, dtype=x.data.dtype))

    norm = cfg.norm_scheme == "layer_norm"
    for i in range(cfg.n_layer):
        attn_in = T.layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"]) if norm else x
        x = T.add(x, _attend(model, attn_in, i, batch, n))
        mlp_in = T.layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"]) if norm else x
        hidden = T.gelu(T.matmul(mlp_in, p[f"h{i}.mlp.w1"]))
        x = T.add(x, T.matmul(hidden, p[f"h{i}.mlp.w2"]))

    if norm:
        x = T.layer_norm(x, p["lnf.g"], p["lnf.b"])
    logits = T.matmul(x, p["head.w"])
    return T.reshape(logits, (batch, n, cfg.vocab_size))
