"""Training run logs: append-only eval records plus config snapshot.

Serialized as line-delimited JSON: a header line carrying the run id,
variant and scale labels, full configs and corpus hash; one record line
per eval point, exactly {"step", "train_loss", "val_loss", "cost"};
and a trailer line marking the run complete or diverged.

The run id is a hash of (model config, train config, corpus hash), so
any config change produces a different id and invalidates cached cells.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def short_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Record:
    step: int
    train_loss: float
    val_loss: float
    cost: float


@dataclass
class RunLog:
    run_id: str
    variant: str
    scale: str
    model_config: dict
    train_config: dict
    corpus_hash: str
    active_params_per_token: int
    tokens_per_step: int
    records: list[Record] = field(default_factory=list)
    diverged: bool = False
    wall_seconds: float = 0.0

    @property
    def final_step(self) -> int:
        return self.records[-1].step if self.records else 0

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss

    @property
    def min_val_loss(self) -> float:
        return min(r.val_loss for r in self.records)

    @property
    def min_val_step(self) -> int:
        """Step of the first record achieving the minimum validation loss."""
        best = self.min_val_loss
        return next(r.step for r in self.records if r.val_loss == best)

    def is_complete(self, total_steps: int) -> bool:
        return not self.diverged and bool(self.records) and self.final_step == total_steps

    def append(self, step: int, train_loss: float, val_loss: float, cost: float) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError(f"record steps must increase: {step} after {self.final_step}")
        self.records.append(Record(step, train_loss, val_loss, cost))

    def to_jsonl(self, path) -> None:
        lines = [
            canonical_json(
                {
                    "run_id": self.run_id,
                    "variant": self.variant,
                    "scale": self.scale,
                    "model_config": self.model_config,
                    "train_config": self.train_config,
                    "corpus_hash": self.corpus_hash,
                    "active_params_per_token": self.active_params_per_token,
                    "tokens_per_step": self.tokens_per_step,
                }
            )
        ]
        for r in self.records:
            lines.append(
                json.dumps(
                    {"step": r.step, "train_loss": r.train_loss,
                     "val_loss": r.val_loss, "cost": r.cost},
                    sort_keys=True,
                )
            )
        # wall time is deliberately NOT serialized: identical runs must
        # produce bit-identical log files (it lives in the suite manifest)
        lines.append(canonical_json({"status": "diverged" if self.diverged else "complete"}))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path) -> "RunLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty log")
        header = json.loads(lines[0])
        log = cls(
            run_id=header["run_id"],
            variant=header["variant"],
            scale=header["scale"],
            model_config=header["model_config"],
            train_config=header["train_config"],
            corpus_hash=header["corpus_hash"],
            active_params_per_token=header["active_params_per_token"],
            tokens_per_step=header["tokens_per_step"],
        )
        saw_trailer = False
        for line in lines[1:]:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "step" in obj:
                log.append(obj["step"], obj["train_loss"], obj["val_loss"], obj["cost"])
            elif "status" in obj:
                log.diverged = obj["status"] == "diverged"
                log.wall_seconds = obj.get("wall_seconds", 0.0)
                saw_trailer = True
        if not saw_trailer:
            raise ValueError(f"{path}: truncated log (no trailer)")
        return log


def run_identity(model_config: dict, train_config: dict, corpus_hash: str) -> str:
    return short_hash({"model": model_config, "train": train_config, "corpus": corpus_hash})
