"""Deterministic training loop: fixed step budget, periodic validation,
structured cost logging.

Every run at a given scale executes the same number of steps on the same
tokens-per-step, so equal steps means equal cost within that scale, and
the validation batch set is pinned by its own seed so loss differences
between variants are attributable to the variant.

Divergence (any non-finite value) aborts the run but keeps the partial
log, marked; degraded variants are results, not crashes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
import numpy as np

from . import tensor as T
from .data import BatchSampler, DataError, SplitDataset
from .model import Model, ModelConfig, build_model, forward, param_count
from .runlog import RunLog, run_identity
from .tensor import NonFiniteError, Tape, Tensor


class DivergedRunError(RuntimeError):
    """Training hit a non-finite value; the partial, marked log is attached."""

    def __init__(self, run_log: RunLog, step: int):
        super().__init__(f"run diverged at step {step}")
        self.run_log = run_log
        self.step = step


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int
    eval_interval: int = 500
    eval_batches: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    warmup_steps: int = -1   # -1 -> 5% of total_steps
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    eval_seed: int = 1234    # shared across variants and seeds at a scale

    def __post_init__(self):
        if self.warmup_steps < 0:
            self.warmup_steps = self.total_steps // 20
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("total_steps >= 0, batch_size >= 1, eval_interval >= 1 required")
        if self.total_steps > 0 and self.total_steps % self.eval_interval != 0:
            raise ValueError(
                f"eval_interval {self.eval_interval} must divide total_steps {self.total_steps}"
            )
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to lr_max, then cosine decay to lr_min at total_steps."""

    lr_max: float
    lr_min: float
    warmup_steps: int
    total_steps: int

    def lr(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr_max * (step + 1) / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.lr_max
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
               step_index: int, schedule: LrSchedule, betas=(0.9, 0.95), eps: float = 1e-8,
               weight_decay: float = 0.1) -> dict:
    """One decoupled-weight-decay Adam update; mutates params, returns state.

    Decay applies only to matrices (ndim >= 2), never to norm gains/biases.
    Bias correction uses t = step_index + 1.
    """
    if not state:
        state = {
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()},
        }
    beta1, beta2 = betas
    t = step_index + 1
    lr = schedule.lr(step_index)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype.type
        m, v = state["m"][name], state["v"][name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * np.square(g)
        if weight_decay and p.data.ndim >= 2:
            p.data *= dt(1.0 - lr * weight_decay)
        denom = v * dt(1.0 / bc2)
        np.sqrt(denom, out=denom)
        denom += dt(eps)
        np.divide(m, denom, out=denom)
        denom *= dt(lr / bc1)
        p.data -= denom
    return state


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad), dtype=np.float64))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def _batch_loss(model: Model, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
    batch, n = inputs.shape
    logits = forward(model, inputs)
    flat = T.reshape(logits, (batch * n, model.config.vocab_size))
    return T.cross_entropy(flat, targets.reshape(-1))


def evaluate(model: Model, dataset: SplitDataset, eval_batches: int, seed: int,
             batch_size: int = 4) -> float:
    """Mean loss over a fixed, seed-determined set of validation batches."""
    sampler = BatchSampler(dataset.val_ids, batch_size=batch_size,
                           context_len=model.config.context_len, seed=seed)
    losses = [
        float(_batch_loss(model, *sampler.sample(k)).data) for k in range(eval_batches)
    ]
    return float(np.mean(losses, dtype=np.float64))


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: SplitDataset,
          *, variant: str = "", scale: str = "", checkpoint_path=None) -> RunLog:
    """Run the full budget and return the complete RunLog.

    Raises DivergedRunError (partial log attached) if any loss, gradient,
    or parameter turns non-finite.
    """
    cfg = model_config
    tcfg = train_config
    tcfg.validate()
    if len(dataset.train_ids) <= 10 * cfg.context_len:
        raise DataError(
            f"train split of {len(dataset.train_ids)} tokens is too small "
            f"for context_len {cfg.context_len}"
        )

    model = build_model(cfg)
    _, active = param_count(cfg)
    tokens_per_step = tcfg.batch_size * cfg.context_len
    log = RunLog(
        run_id=run_identity(cfg.to_dict(), tcfg.to_dict(), dataset.corpus_hash),
        variant=variant,
        scale=scale,
        model_config=cfg.to_dict(),
        train_config=tcfg.to_dict(),
        corpus_hash=dataset.corpus_hash,
        active_params_per_token=active,
        tokens_per_step=tokens_per_step,
    )

    def cost(step: int) -> float:
        return float(active) * tokens_per_step * step

    sampler = BatchSampler(dataset.train_ids, tcfg.batch_size, cfg.context_len, tcfg.seed)
    schedule = LrSchedule(tcfg.lr_max, tcfg.lr_min, tcfg.warmup_steps, tcfg.total_steps)
    started = time.perf_counter()

    # step-0 record: probe loss on the first training batch, no update
    probe = float(_batch_loss(model, *sampler.sample(0)).data)
    log.append(0, probe, evaluate(model, dataset, tcfg.eval_batches, tcfg.eval_seed,
                                  tcfg.batch_size), 0.0)

    state: dict = {}
    window: list[float] = []
    for step in range(tcfg.total_steps):
        try:
            inputs, targets = sampler.sample(step)
            with Tape() as tape:
                loss = _batch_loss(model, inputs, targets)
                tape.backward(loss)
            clip_gradients(model.params, tcfg.grad_clip)
            grads = {k: p.grad for k, p in model.params.items()}
            state = adamw_step(model.params, grads, state, step, schedule,
                               tcfg.betas, tcfg.eps, tcfg.weight_decay)
            model.zero_grad()
            window.append(float(loss.data))
            if (step + 1) % tcfg.eval_interval == 0:
                val = evaluate(model, dataset, tcfg.eval_batches, tcfg.eval_seed,
                               tcfg.batch_size)
                log.append(step + 1, float(np.mean(window, dtype=np.float64)), val,
                           cost(step + 1))
                window.clear()
        except NonFiniteError:
            log.diverged = True
            log.wall_seconds = time.perf_counter() - started
            raise DivergedRunError(log, step) from None

    log.wall_seconds = time.perf_counter() - started
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(model, checkpoint_path)
    return log
