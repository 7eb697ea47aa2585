"""Corpus ingestion, byte-level tokenization, splitting, batch sampling.

Tokenization is the identity map byte -> id (vocab 256), so loss values
are in nats per byte. The validation split is a deterministic tail
holdout, and batch offsets come from a counter-based Philox generator
keyed by (seed, step): the full batch schedule of a run is replayable
from the config alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256


class DataError(ValueError):
    """Corpus or split too small for the requested configuration."""


@dataclass(frozen=True)
class Corpus:
    data: bytes
    provenance: str

    def __post_init__(self):
        if not self.data:
            raise DataError("corpus is empty")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


def load_corpus(path) -> Corpus:
    path = Path(path)
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    return Corpus(data=data, provenance=f"{path}#sha256:{digest}")


def tokenize_bytes(corpus: Corpus) -> np.ndarray:
    """Identity byte -> id mapping; length preserved."""
    return np.frombuffer(corpus.data, dtype=np.uint8).astype(np.int64)


def detokenize_bytes(ids: np.ndarray) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class SplitDataset:
    train_ids: np.ndarray
    val_ids: np.ndarray
    val_fraction: float
    corpus_hash: str = ""


def split(tokens: np.ndarray, val_fraction: float, seed: int = 0,
          corpus_hash: str = "") -> SplitDataset:
    """Deterministic tail holdout: the last val_fraction of the stream.

    The seed parameter is accepted for interface stability but unused;
    a tail split has nothing random about it.
    """
    del seed
    if not 0.01 <= val_fraction <= 0.5:
        raise DataError(f"val_fraction={val_fraction} outside [0.01, 0.5]")
    n = len(tokens)
    if n < 20:
        raise DataError(f"corpus of {n} tokens is too small to split")
    cut = n - int(round(n * val_fraction))
    return SplitDataset(train_ids=tokens[:cut], val_ids=tokens[cut:],
                        val_fraction=val_fraction, corpus_hash=corpus_hash)


class BatchSampler:
    """Pure function (seed, step) -> batch of context windows."""

    def __init__(self, ids: np.ndarray, batch_size: int, context_len: int, seed: int):
        self.ids = ids
        self.batch_size = batch_size
        self.context_len = context_len
        self.seed = seed
        self.max_start = len(ids) - context_len - 1
        if self.max_start < 0:
            raise DataError(
                f"split of {len(ids)} tokens cannot fit a window of {context_len + 1}"
            )

    def offsets(self, step: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=self.seed, counter=step))
        return rng.integers(0, self.max_start + 1, size=self.batch_size)

    def sample(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, targets) [batch, context_len]; targets[i][t] == inputs[i][t+1]."""
        offs = self.offsets(step)
        inputs = np.stack([self.ids[o : o + self.context_len] for o in offs])
        targets = np.stack([self.ids[o + 1 : o + self.context_len + 1] for o in offs])
        return inputs, targets
