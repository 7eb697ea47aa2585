"""Experiment suite driver: (scale x variant x seed) grid over one corpus.

An ExperimentSpec is a single declarative JSON file; a published spec plus
the corpus reproduces a suite byte-for-byte. Cells are resumable: a cell
whose log exists, is complete, and matches the expected run id is skipped,
so config edits invalidate exactly the affected cells.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

from .data import load_corpus, split, tokenize_bytes
from .model import ModelConfig
from .runlog import RunLog, run_identity, short_hash
from .train import DivergedRunError, TrainConfig, train

# Each variant is a set of config overrides applied to a scale's base model.
# The baseline is learned absolute positions, no normalization, dense naive
# attention, full multi-head K/V; every variant toggles one mechanism
# (the combined preset toggles three).
VARIANTS: dict[str, dict] = {
    "baseline": {},
    "layer_norm": {"norm_scheme": "layer_norm"},
    "rope": {"pos_scheme": "rope"},
    "blocked_attn": {"attn_kernel": "blocked"},
    "sparse_attn": {"attn_pattern": "strided_sparse"},
    "mqa": {"n_kv_head": 1},
    "ln_rope_blocked": {
        "norm_scheme": "layer_norm",
        "pos_scheme": "rope",
        "attn_kernel": "blocked",
    },
}


class SpecError(ValueError):
    """Malformed experiment spec."""


@dataclass
class ExperimentSpec:
    corpus: str
    scales: dict                    # name -> {"model": {...}, "train": {...}}
    variants: list[str]
    seeds: list[int]
    val_fraction: float = 0.1
    synthesize_mb: float = 0.0      # >0: generate the corpus file if missing
    corpus_seed: int = 0
    base_dir: Path = field(default_factory=Path, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if "baseline" not in self.variants:
            raise SpecError("variants must include 'baseline'")
        if len(self.scales) < 2:
            raise SpecError("need at least two scales for classification")
        if len(set(self.variants)) != len(self.variants):
            raise SpecError("variant names must be unique")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise SpecError(f"unknown variants {unknown}; known: {sorted(VARIANTS)}")
        if not self.seeds:
            raise SpecError("need at least one seed")
        for name, scale in self.scales.items():
            if "model" not in scale or "train" not in scale:
                raise SpecError(f"scale {name!r} needs 'model' and 'train' sections")

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        path = Path(path)
        raw = json.loads(path.read_text())
        raw.pop("comment", None)
        return cls(base_dir=path.parent, **raw)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "scales": self.scales,
            "variants": self.variants,
            "seeds": self.seeds,
            "val_fraction": self.val_fraction,
            "synthesize_mb": self.synthesize_mb,
            "corpus_seed": self.corpus_seed,
        }

    @property
    def spec_hash(self) -> str:
        return short_hash(self.to_dict())

    def corpus_path(self) -> Path:
        p = Path(self.corpus)
        return p if p.is_absolute() else self.base_dir / p

    def model_config(self, scale: str, variant: str, seed: int) -> ModelConfig:
        base = dict(self.scales[scale]["model"])
        base.update(VARIANTS[variant])
        base["seed"] = seed
        return ModelConfig(**base)

    def train_config(self, scale: str, seed: int) -> TrainConfig:
        cfg = dict(self.scales[scale]["train"])
        cfg["seed"] = seed
        return TrainConfig(**cfg)

    def cells(self) -> list[tuple[str, str, int]]:
        return [(sc, v, sd) for sc in self.scales for v in self.variants for sd in self.seeds]


def ensure_corpus(spec: ExperimentSpec) -> Path:
    """Return the corpus path, synthesizing the file if the spec allows it."""
    path = spec.corpus_path()
    if not path.exists():
        if spec.synthesize_mb <= 0:
            raise FileNotFoundError(f"corpus file {path} not found")
        from .textgen import synthesize_corpus

        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(synthesize_corpus(int(spec.synthesize_mb * 1_000_000),
                                           seed=spec.corpus_seed))
    return path


def load_dataset(spec: ExperimentSpec):
    corpus = load_corpus(ensure_corpus(spec))
    tokens = tokenize_bytes(corpus)
    return split(tokens, spec.val_fraction, corpus_hash=corpus.sha256)


def cell_dir(out_dir, scale: str, variant: str, seed: int) -> Path:
    return Path(out_dir) / scale / variant / str(seed)


def expected_run_id(spec: ExperimentSpec, scale: str, variant: str, seed: int,
                    corpus_hash: str) -> str:
    return run_identity(
        spec.model_config(scale, variant, seed).to_dict(),
        spec.train_config(scale, seed).to_dict(),
        corpus_hash,
    )


def run_cell(spec: ExperimentSpec, scale: str, variant: str, seed: int, out_dir,
             dataset=None, prev_wall: float = 0.0) -> dict:
    """Train one cell (or reuse its complete log); returns a manifest entry."""
    if dataset is None:
        dataset = load_dataset(spec)
    target = cell_dir(out_dir, scale, variant, seed)
    log_path = target / "run.jsonl"
    mcfg = spec.model_config(scale, variant, seed)
    tcfg = spec.train_config(scale, seed)
    rid = run_identity(mcfg.to_dict(), tcfg.to_dict(), dataset.corpus_hash)
    # manifest-relative, so out_dir can be moved or mounted elsewhere
    entry = {"scale": scale, "variant": variant, "seed": seed, "run_id": rid,
             "log": f"{scale}/{variant}/{seed}/run.jsonl"}

    if log_path.exists():
        try:
            existing = RunLog.from_jsonl(log_path)
            if existing.run_id == rid and (
                existing.diverged or existing.is_complete(tcfg.total_steps)
            ):
                entry["status"] = "diverged" if existing.diverged else "cached"
                entry["wall_seconds"] = prev_wall
                return entry
        except (ValueError, KeyError):
            pass  # stale or truncated log: redo the cell

    target.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        log = train(mcfg, tcfg, dataset, variant=variant, scale=scale,
                    checkpoint_path=target / "model.ckpt")
        entry["status"] = "complete"
    except DivergedRunError as err:
        log = err.run_log
        entry["status"] = "diverged"
    log.to_jsonl(log_path)
    entry["wall_seconds"] = time.perf_counter() - started
    return entry


def _cell_worker(spec_dict: dict, base_dir: str, scale: str, variant: str,
                 seed: int, out_dir: str, prev_wall: float = 0.0) -> dict:
    spec = ExperimentSpec(base_dir=Path(base_dir), **spec_dict)
    return run_cell(spec, scale, variant, seed, out_dir, prev_wall=prev_wall)


def write_manifest(out_dir, spec: ExperimentSpec, entries: list[dict],
                   finished: bool) -> None:
    manifest = {
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash,
        "cells": entries,
        "finished": finished,
    }
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _previous_wall_times(out_dir) -> dict:
    path = Path(out_dir) / "manifest.json"
    if not path.exists():
        return {}
    try:
        manifest = json.loads(path.read_text())
        return {(e["scale"], e["variant"], e["seed"]): e.get("wall_seconds", 0.0)
                for e in manifest.get("cells", [])}
    except (ValueError, KeyError):
        return {}


def run_suite(spec: ExperimentSpec, out_dir, jobs: int = 1, echo=print) -> dict:
    """Execute the full grid, skipping complete cells; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(spec)
    cells = spec.cells()
    prev_wall = _previous_wall_times(out_dir)
    entries: list[dict] = []

    if jobs <= 1:
        for scale, variant, seed in cells:
            try:
                entry = run_cell(spec, scale, variant, seed, out_dir, dataset,
                                 prev_wall.get((scale, variant, seed), 0.0))
            except Exception as err:  # a broken cell must not sink the grid
                entry = {"scale": scale, "variant": variant, "seed": seed,
                         "status": "failed", "error": f"{type(err).__name__}: {err}",
                         "log": f"{scale}/{variant}/{seed}/run.jsonl"}
            entries.append(entry)
            echo(f"[{len(entries)}/{len(cells)}] {scale}/{variant}/seed{seed}: "
                 f"{entry['status']} ({entry.get('wall_seconds', 0.0):.1f}s)")
            write_manifest(out_dir, spec, entries, finished=False)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_cell_worker, spec.to_dict(), str(spec.base_dir),
                            scale, variant, seed, str(out_dir),
                            prev_wall.get((scale, variant, seed), 0.0)): (scale, variant, seed)
                for scale, variant, seed in cells
            }
            for fut in as_completed(futures):
                scale, variant, seed = futures[fut]
                try:
                    entry = fut.result()
                except Exception as err:
                    entry = {"scale": scale, "variant": variant, "seed": seed,
                             "status": "failed", "error": f"{type(err).__name__}: {err}",
                             "log": f"{scale}/{variant}/{seed}/run.jsonl"}
                entries.append(entry)
                echo(f"[{len(entries)}/{len(cells)}] {entry['scale']}/{entry['variant']}"
                     f"/seed{entry['seed']}: {entry['status']}")
                write_manifest(out_dir, spec, entries, finished=False)
        entries.sort(key=lambda e: (e["scale"], e["variant"], e["seed"]))

    write_manifest(out_dir, spec, entries, finished=True)
    return {"cells": entries, "failed": [e for e in entries if e["status"] == "failed"]}


def resolve_log_path(out_dir, entry: dict) -> Path:
    """Locate a manifest entry's log: manifest-relative, absolute, or legacy
    CWD-relative paths all resolve; falls back to the canonical cell layout."""
    out_dir = Path(out_dir)
    path = Path(entry["log"])
    for candidate in (
        out_dir / path,
        path,
        cell_dir(out_dir, entry["scale"], entry["variant"], entry["seed"]) / "run.jsonl",
    ):
        if candidate.exists():
            return candidate
    return out_dir / path


def load_suite_logs(out_dir) -> list[RunLog]:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {out_dir}; run the suite first")
    manifest = json.loads(manifest_path.read_text())
    logs = []
    for entry in manifest["cells"]:
        path = resolve_log_path(out_dir, entry)
        if path.exists():
            logs.append(RunLog.from_jsonl(path))
    return logs


def analyze_suite(out_dir, delta: float = 0.05, interpolate: bool = True) -> dict:
    """Build report.md, report.csv, and loss_curves.csv under out_dir."""
    from .ceg import build_report, report_csv, report_markdown

    out_dir = Path(out_dir)
    logs = load_suite_logs(out_dir)
    reports = build_report(logs, delta=delta, interpolate=interpolate)

    notes = [
        f"corpus sha256: {logs[0].corpus_hash}" if logs else "no logs",
        f"interpolation between eval checkpoints: {'on' if interpolate else 'off'}",
        "cost proxy: active parameters per token x tokens processed (proportional, not absolute FLOPs)",
    ]
    manifest = json.loads((out_dir / "manifest.json").read_text())
    steps_by_scale = {name: sc["train"].get("total_steps", 1)
                      for name, sc in manifest["spec"]["scales"].items()}
    timing: dict = {}
    for entry in manifest["cells"]:
        wall = entry.get("wall_seconds", 0.0)
        if wall > 0:
            steps = max(1, steps_by_scale.get(entry["scale"], 1))
            timing.setdefault((entry["scale"], entry["variant"]), []).append(wall / steps)
    for (scale, variant), secs in sorted(timing.items()):
        if variant in ("baseline", "blocked_attn"):
            notes.append(f"mean wall-clock per step, {scale}/{variant}: "
                         f"{1000 * sum(secs) / len(secs):.1f} ms")

    (out_dir / "report.md").write_text(report_markdown(reports, delta=delta, notes=notes))
    (out_dir / "report.csv").write_text(report_csv(reports))

    lines = ["scale,variant,seed,step,val_loss"]
    for log in sorted(logs, key=lambda l: (l.scale, l.variant, l.train_config.get("seed", 0))):
        seed = log.train_config.get("seed", 0)
        for r in log.records:
            lines.append(f"{log.scale},{log.variant},{seed},{r.step},{r.val_loss:.6f}")
    (out_dir / "loss_curves.csv").write_text("\n".join(lines) + "\n")
    return {"reports": reports, "out": str(out_dir)}
