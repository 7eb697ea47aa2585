"""Desk-scale GPT training lab for measuring compute-equivalent gain (CEG).

Trains micro GPT variants (RoPE, LayerNorm, blocked attention, strided
sparse attention, MQA) at two scales on a single CPU, then computes CEG
from the validation-loss curves and classifies each variant as
compute-dependent or compute-independent.
"""

import os

# Reference mode pins BLAS to one thread so every run is bit-reproducible.
# Set CEGLAB_BLAS_THREADS>1 to opt into the parallel matmul path; it agrees
# with the reference path within 1e-5 relative per element but must not be
# used for runs that assert bit-identical logs.
os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("CEGLAB_BLAS_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("CEGLAB_BLAS_THREADS", "1"))

from .tensor import (  # noqa: E402
    Tensor,
    Tape,
    NonFiniteError,
    DegenerateRowError,
    GradientError,
    matmul,
    add,
    mul,
    scale,
    gelu,
    embedding,
    reshape,
    transpose,
    tsum,
    softmax_rows,
    layer_norm,
    cross_entropy,
    backward,
    grad_check,
)
from .attention import (  # noqa: E402
    apply_rope,
    attention_blocked,
    attention_naive,
    causal_mask,
    strided_sparse_mask,
)
from .model import ModelConfig, Model, build_model, forward, param_count  # noqa: E402
from .data import Corpus, load_corpus, split, tokenize_bytes, BatchSampler  # noqa: E402
from .train import TrainConfig, train, evaluate, DivergedRunError  # noqa: E402
from .runlog import RunLog  # noqa: E402
from .ceg import (  # noqa: E402
    CostModel,
    CegResult,
    auxiliary_ceg,
    build_report,
    classify,
    compute_cost,
    primary_ceg,
    steps_to_reach,
)
from .experiment import ExperimentSpec, run_suite, analyze_suite  # noqa: E402

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "DegenerateRowError",
    "GradientError",
    "matmul",
    "add",
    "mul",
    "scale",
    "gelu",
    "embedding",
    "reshape",
    "transpose",
    "tsum",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
    "backward",
    "grad_check",
    "apply_rope",
    "attention_blocked",
    "attention_naive",
    "causal_mask",
    "strided_sparse_mask",
    "ModelConfig",
    "Model",
    "build_model",
    "forward",
    "param_count",
    "Corpus",
    "load_corpus",
    "split",
    "tokenize_bytes",
    "BatchSampler",
    "TrainConfig",
    "train",
    "evaluate",
    "DivergedRunError",
    "RunLog",
    "CostModel",
    "CegResult",
    "auxiliary_ceg",
    "build_report",
    "classify",
    "compute_cost",
    "primary_ceg",
    "steps_to_reach",
    "ExperimentSpec",
    "run_suite",
    "analyze_suite",
]
