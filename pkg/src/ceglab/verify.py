"""Fast property battery: the checks behind `ceglab verify`.

Each check re-derives an expected value from an independent route
(finite differences, enumeration, direct evaluation) and compares the
production path against it. The whole battery is built to finish in
well under two minutes on one CPU core.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    apply_rope,
    attention_blocked,
    attention_naive,
    causal_mask,
    strided_sparse_mask,
    validate_mask,
)
from .ceg import classify, primary_ceg, steps_to_reach
from .model import ModelConfig, build_model, forward
from .runlog import RunLog
from .tensor import Tape, Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _model_loss(model, tokens):
    batch, n = tokens.shape
    logits = forward(model, tokens)
    flat = T.reshape(logits, (batch * n, model.config.vocab_size))
    return T.cross_entropy(flat, tokens.reshape(-1))


def check_transformer_gradients(samples: int = 200, h: float = 1e-5) -> CheckResult:
    """Central differences vs backprop on a 2-layer model, all toggles on."""
    cfg = ModelConfig(n_layer=2, n_head=2, d_model=16, vocab_size=17, context_len=8,
                      norm_scheme="layer_norm", pos_scheme="rope",
                      attn_pattern="strided_sparse", attn_kernel="blocked",
                      block_rows=3, block_cols=5, seed=11)
    model = build_model(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 8))

    model.zero_grad()
    with Tape() as tape:
        tape.backward(_model_loss(model, tokens))

    names = sorted(model.params)
    sizes = np.array([model.params[n].data.size for n in names])
    cum = np.cumsum(sizes)
    picks = rng.choice(int(cum[-1]), size=samples, replace=False)
    worst = 0.0
    for flat_idx in picks:
        pi = int(np.searchsorted(cum, flat_idx, side="right"))
        local = int(flat_idx - (cum[pi - 1] if pi else 0))
        param = model.params[names[pi]]
        flat = param.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        f_plus = float(_model_loss(model, tokens).data)
        flat[local] = orig - h
        f_minus = float(_model_loss(model, tokens).data)
        flat[local] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(param.grad.reshape(-1)[local])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric)))
    return CheckResult("transformer gradient check (2 layers, all toggles)",
                       worst < 1e-4, f"max rel err {worst:.2e} over {samples} params")


def check_layer_norm_gradient() -> CheckResult:
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=1.5, size=(4, 8)), requires_grad=True, dtype=np.float64)
    gain = Tensor(rng.normal(size=8), dtype=np.float64)
    bias = Tensor(rng.normal(size=8), dtype=np.float64)
    err = T.grad_check(lambda t: T.tsum(T.layer_norm(t, gain, bias)), x, samples=24, h=1e-5)
    return CheckResult("layer norm gradient vs finite differences", err < 1e-5,
                       f"max rel err {err:.2e}")


def check_kernel_equivalence() -> CheckResult:
    rng = np.random.default_rng(2)
    h_heads, n, d = 2, 64, 8
    worst = 0.0
    for mask in (causal_mask(n), strided_sparse_mask(n, 8)):
        q, k, v = (rng.normal(size=(h_heads, n, d)).astype(np.float32) for _ in range(3))
        reference = attention_naive(q, k, v, mask).data
        for block in (1, 7, 16, n):
            blocked = attention_blocked(q, k, v, mask, block_rows=block, block_cols=block).data
            worst = max(worst, float(np.abs(reference - blocked).max()))
    return CheckResult("blocked vs naive attention, blocks {1,7,16,n} +/- sparse",
                       worst < 1e-5, f"max abs diff {worst:.2e}")


def check_rope_properties() -> CheckResult:
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 16, 8)).astype(np.float32))
    ident = np.array_equal(apply_rope(x, np.zeros(16, dtype=int)).data, x.data)
    rotated = apply_rope(x, np.arange(16))
    norm_err = float(np.abs(np.linalg.norm(rotated.data, axis=-1)
                            - np.linalg.norm(x.data, axis=-1)).max())
    q = rng.normal(size=(2, 12, 8)).astype(np.float32)
    k = rng.normal(size=(2, 12, 8)).astype(np.float32)

    def scores(shift):
        pos = np.arange(12) + shift
        return (apply_rope(Tensor(q), pos).data
                @ np.swapaxes(apply_rope(Tensor(k), pos).data, -1, -2))

    shift_err = float(np.abs(scores(0) - scores(9)).max())
    ok = ident and norm_err < 1e-6 and shift_err < 1e-5
    return CheckResult("rotary embedding: position-0 identity, norm, shift invariance",
                       ok, f"norm err {norm_err:.2e}, shift err {shift_err:.2e}")


def check_sparse_masks() -> CheckResult:
    details = []
    ok = True
    for n in (16, 64, 256):
        l = math.ceil(math.sqrt(n))
        mask = strided_sparse_mask(n, l)
        try:
            validate_mask(mask)
        except ValueError as err:
            return CheckResult("strided sparse mask invariants", False, str(err))
        bound = 2 * n * l
        nnz = int(mask.sum())
        m = mask.astype(np.int32)
        covered = (mask | ((m @ m) > 0))[np.tril_indices(n)].all()
        ok &= nnz <= bound and bool(covered)
        details.append(f"n={n}: nnz {nnz} <= {bound}, 2-hop {'ok' if covered else 'FAIL'}")
    return CheckResult("strided sparse mask: causal, self, 2-hop, nnz bound",
                       ok, "; ".join(details))


def check_layer_norm_statistics() -> CheckResult:
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(loc=0.7, scale=2.0, size=(64, 96)).astype(np.float32))
    gain = Tensor(np.ones(96, dtype=np.float32))
    bias = Tensor(np.zeros(96, dtype=np.float32))
    out = T.layer_norm(x, gain, bias).data  # pre-affine via unit gain/zero bias
    mean_err = float(np.abs(out.mean(axis=-1)).max())
    var_err = float(np.abs(out.var(axis=-1) - 1.0).max())
    return CheckResult("layer norm pre-affine statistics",
                       mean_err < 1e-6 and var_err < 1e-4,
                       f"|mean| {mean_err:.2e}, |var-1| {var_err:.2e}")


def check_causality_all_variants() -> CheckResult:
    rng = np.random.default_rng(5)
    n = 12
    axes = {
        "pos_scheme": ["learned_absolute", "sinusoidal", "rope"],
        "norm_scheme": ["none", "layer_norm"],
        "attn_pattern": ["dense", "strided_sparse"],
        "attn_kernel": ["naive", "blocked"],
        "n_kv_head": [0, 1],
    }
    combos = 0
    for values in itertools.product(*axes.values()):
        overrides = dict(zip(axes.keys(), values))
        cfg = ModelConfig(n_layer=2, n_head=2, d_model=16, vocab_size=19,
                          context_len=n, block_rows=5, block_cols=4, seed=3, **overrides)
        model = build_model(cfg)
        tokens = rng.integers(0, 19, size=(1, n))
        edited = tokens.copy()
        edited[:, 7:] = (edited[:, 7:] + 5) % 19
        if not np.array_equal(forward(model, tokens).data[:, :7],
                              forward(model, edited).data[:, :7]):
            return CheckResult("causality probe across every toggle combination",
                               False, f"influence leak under {overrides}")
        combos += 1
    return CheckResult("causality probe across every toggle combination",
                       True, f"{combos} combinations")


def _fixture_log(points, variant="alg"):
    log = RunLog(run_id=variant, variant=variant, scale="s", model_config={},
                 train_config={}, corpus_hash="", active_params_per_token=1000,
                 tokens_per_step=10)
    for step, val in points:
        log.append(step, val, val, 1000.0 * 10 * step)
    return log


def check_ceg_oracles() -> CheckResult:
    base = _fixture_log([(0, 5.0), (25_000, 3.5), (50_000, 3.0)], "baseline")
    alg2x = _fixture_log([(0, 5.0), (25_000, 3.0), (50_000, 3.0)])
    checks = {
        "self==1": primary_ceg(base, base).primary_ceg == 1.0,
        "2x": abs(primary_ceg(base, alg2x).primary_ceg - 2.0) < 1e-12,
        "aux trigger": primary_ceg(base, _fixture_log([(0, 5.0), (50_000, 3.001)])).mode
        == "auxiliary",
        "primary at equality": primary_ceg(base, _fixture_log([(0, 5.0), (50_000, 3.0)])).mode
        == "primary",
        "interp==discrete on checkpoints": steps_to_reach(base, 3.5, True)
        == steps_to_reach(base, 3.5, False)
        == 25_000.0,
        "step-ratio reduction": abs(
            primary_ceg(base, alg2x).primary_ceg
            - primary_ceg(base, alg2x).baseline_steps / primary_ceg(base, alg2x).alg_steps
        ) < 1e-12,
        "classify LN": classify(1.836, 1.421) == "independent",
        "classify RoPE": classify(1.870, 1.350) == "independent",
        "classify MQA": classify(0.673, 0.931) == "dependent",
        "classify sparse": classify(0.515, 0.964) == "dependent",
    }
    failed = [k for k, ok in checks.items() if not ok]
    return CheckResult("CEG engine unit oracles", not failed,
                       "all oracles agree" if not failed else f"failed: {failed}")


ALL_CHECKS = [
    check_transformer_gradients,
    check_layer_norm_gradient,
    check_kernel_equivalence,
    check_rope_properties,
    check_sparse_masks,
    check_layer_norm_statistics,
    check_causality_all_variants,
    check_ceg_oracles,
]


def run_battery(echo=print) -> tuple[list[CheckResult], float]:
    started = time.perf_counter()
    results = []
    for check in ALL_CHECKS:
        result = check()
        results.append(result)
        mark = "ok " if result.passed else "FAIL"
        echo(f"[{mark}] {result.name}: {result.detail}")
    elapsed = time.perf_counter() - started
    echo(f"{sum(r.passed for r in results)}/{len(results)} checks passed "
         f"in {elapsed:.1f}s")
    return results, elapsed
