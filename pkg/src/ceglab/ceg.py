"""Compute-equivalent gain: cost accounting, CEG from loss curves,
and the compute-dependent vs compute-independent classification.

Cost is the proxy  active_params_per_token * tokens_processed  (it is
proportional to FLOPs, not equal to them, and says nothing about data
quality). CEG compares a baseline curve against a variant curve:

  primary   the variant's final val loss reached the baseline's final
            val loss (the target); CEG = cost_base(S_base)/cost_alg(S_alg)
            where both step counts are steps-to-target. When the cost
            models match this reduces to the pure step ratio.
  auxiliary the variant never reached the target (its final loss is
            strictly worse); re-target at the variant's own minimum and
            measure the baseline against that.
  incomparable  neither curve reaches the other's level.

A variant is compute-independent when its CEG clears 1+delta at both
scales, compute-dependent when it is below 1+delta at the small scale
but gains at least delta moving to the large scale, else inconclusive.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Optional

from .runlog import RunLog


class AnalysisError(ValueError):
    """CEG cannot be computed (e.g. diverged or missing baseline)."""


@dataclass(frozen=True)
class CostModel:
    active_params_per_token: int
    tokens_per_step: int

    def __post_init__(self):
        if self.active_params_per_token <= 0 or self.tokens_per_step <= 0:
            raise AnalysisError("cost model factors must be positive")

    def cost(self, steps: float) -> float:
        return float(self.active_params_per_token) * self.tokens_per_step * steps


def cost_model_of(log: RunLog) -> CostModel:
    return CostModel(log.active_params_per_token, log.tokens_per_step)


def compute_cost(log: RunLog, up_to_step: float) -> float:
    """Proxy cost of the run through up_to_step (monotone in steps)."""
    if up_to_step < 0 or up_to_step > log.final_step:
        raise AnalysisError(f"step {up_to_step} outside log range [0, {log.final_step}]")
    return cost_model_of(log).cost(up_to_step)


def steps_to_reach(log: RunLog, target_loss: float, interpolate: bool = True) -> Optional[float]:
    """First step at which val loss <= target; None if never reached.

    With interpolation (default), a linear fit between the bracketing eval
    points yields fractional steps; without it, the first eval checkpoint
    at or below target is returned.
    """
    if not log.records:
        raise AnalysisError("empty log")
    prev = None
    for r in log.records:
        if r.val_loss <= target_loss:
            if interpolate and prev is not None and prev.val_loss > r.val_loss:
                frac = (prev.val_loss - target_loss) / (prev.val_loss - r.val_loss)
                return prev.step + frac * (r.step - prev.step)
            return float(r.step)
        prev = r
    return None


@dataclass
class CegResult:
    mode: str                       # "primary" | "auxiliary" | "incomparable"
    target_loss: float              # baseline final val loss (the primary target)
    baseline_steps: Optional[float] = None
    alg_steps: Optional[float] = None
    primary_ceg: Optional[float] = None
    auxiliary: Optional[dict] = None  # {alg_min_loss, alg_steps, baseline_steps, auxiliary_ceg}

    @property
    def ceg(self) -> Optional[float]:
        """The effective gain: primary when available, else auxiliary."""
        if self.mode == "primary":
            return self.primary_ceg
        if self.mode == "auxiliary":
            return self.auxiliary["auxiliary_ceg"]
        return None


def primary_ceg(base: RunLog, alg: RunLog, interpolate: bool = True) -> CegResult:
    """CEG of alg against base per the two-target protocol.

    The target is the baseline's final val loss. The primary mode engages
    exactly when alg's final val loss is <= target; otherwise fall through
    to the auxiliary computation. Both step counts are measured as
    steps-to-target so self-comparison is exactly 1.0.
    """
    if base.diverged:
        raise AnalysisError("baseline diverged: no meaningful target loss")
    if not base.records or not alg.records:
        raise AnalysisError("empty log")
    target = base.final_val_loss
    cost_b, cost_a = cost_model_of(base), cost_model_of(alg)

    if not alg.diverged and alg.final_val_loss <= target:
        s_base = steps_to_reach(base, target, interpolate)
        s_alg = steps_to_reach(alg, target, interpolate)
        if cost_a.cost(s_alg) == 0.0:
            ratio = float("inf") if cost_b.cost(s_base) > 0 else 1.0
        else:
            ratio = cost_b.cost(s_base) / cost_a.cost(s_alg)
        return CegResult(mode="primary", target_loss=target,
                         baseline_steps=s_base, alg_steps=s_alg, primary_ceg=ratio)
    return auxiliary_ceg(base, alg, interpolate)


def auxiliary_ceg(base: RunLog, alg: RunLog, interpolate: bool = True) -> CegResult:
    """Fallback CEG using alg's own minimum val loss as the target."""
    if base.diverged:
        raise AnalysisError("baseline diverged: no meaningful target loss")
    target = base.final_val_loss
    alg_min = alg.min_val_loss
    s_alg = float(alg.min_val_step)
    s_base = steps_to_reach(base, alg_min, interpolate)
    if s_base is None:
        return CegResult(mode="incomparable", target_loss=target,
                         auxiliary={"alg_min_loss": alg_min, "alg_steps": s_alg,
                                    "baseline_steps": None, "auxiliary_ceg": None})
    cost_b, cost_a = cost_model_of(base), cost_model_of(alg)
    denom = cost_a.cost(s_alg)
    ratio = cost_b.cost(s_base) / denom if denom else 0.0
    return CegResult(mode="auxiliary", target_loss=target,
                     auxiliary={"alg_min_loss": alg_min, "alg_steps": s_alg,
                                "baseline_steps": s_base, "auxiliary_ceg": ratio})


def classify(ceg_small: Optional[float], ceg_large: Optional[float],
             delta: float = 0.05) -> str:
    """Table-style classification from CEG at two scales.

    independent: gains materialize at both scales (both >= 1+delta).
    dependent:   no gain at the small scale, but the benefit emerges with
                 scale (large >= small + delta).
    """
    if ceg_small is None or ceg_large is None:
        return "inconclusive"
    if ceg_small >= 1.0 + delta and ceg_large >= 1.0 + delta:
        return "independent"
    if ceg_small < 1.0 + delta and ceg_large >= ceg_small + delta:
        return "dependent"
    return "inconclusive"


# ---------------------------------------------------------------------------
# suite-level reporting
# ---------------------------------------------------------------------------

BASELINE_VARIANT = "baseline"


@dataclass
class VariantScaleCell:
    variant: str
    scale: str
    min_val_loss: Optional[float]
    ceg_mode: str
    ceg_median: Optional[float]
    ceg_min: Optional[float]
    ceg_max: Optional[float]
    seeds: int = 0
    diverged: int = 0


@dataclass
class VariantReport:
    variant: str
    cells: dict = field(default_factory=dict)  # scale -> VariantScaleCell
    classification: str = "inconclusive"


def _median(values):
    return statistics.median(values) if values else None


def build_report(logs: list[RunLog], delta: float = 0.05, interpolate: bool = True,
                 ) -> list[VariantReport]:
    """Aggregate per-seed CEGs into the per-variant, per-scale table.

    CEG is computed per seed against the baseline run of the same seed,
    then reported as median with min/max. Classification compares the
    median CEG at the smallest scale against the largest scale (ordered
    by active parameter count).
    """
    by_cell: dict[tuple[str, str], list[RunLog]] = {}
    for log in logs:
        by_cell.setdefault((log.scale, log.variant), []).append(log)
    scales = sorted({s for s, _ in by_cell},
                    key=lambda s: max(l.active_params_per_token
                                      for (sc, _), ls in by_cell.items() if sc == s for l in ls))
    variants = sorted({v for _, v in by_cell})
    for scale in scales:
        if (scale, BASELINE_VARIANT) not in by_cell:
            raise AnalysisError(f"no baseline runs at scale {scale!r}")

    def seed_of(log: RunLog) -> int:
        return log.train_config.get("seed", 0)

    reports = []
    for variant in variants:
        rep = VariantReport(variant=variant)
        per_scale_median: dict[str, Optional[float]] = {}
        for scale in scales:
            runs = by_cell.get((scale, variant), [])
            if not runs:
                continue
            baselines = {seed_of(l): l for l in by_cell[(scale, BASELINE_VARIANT)]}
            cegs, modes = [], []
            losses = []
            diverged = 0
            for log in sorted(runs, key=seed_of):
                if log.diverged:
                    diverged += 1
                if log.records:
                    losses.append(log.min_val_loss)
                base = baselines.get(seed_of(log))
                if base is None or base.diverged:
                    continue
                if variant == BASELINE_VARIANT:
                    cegs.append(1.0)
                    modes.append("primary")
                    continue
                result = primary_ceg(base, log, interpolate)
                modes.append(result.mode)
                if result.ceg is not None:
                    cegs.append(result.ceg)
            mode = "none"
            if modes:
                mode = modes[0] if all(m == modes[0] for m in modes) else "mixed"
            cell = VariantScaleCell(
                variant=variant, scale=scale,
                min_val_loss=_median(losses),
                ceg_mode=mode,
                ceg_median=_median(cegs),
                ceg_min=min(cegs) if cegs else None,
                ceg_max=max(cegs) if cegs else None,
                seeds=len(runs), diverged=diverged,
            )
            rep.cells[scale] = cell
            per_scale_median[scale] = cell.ceg_median
        if variant == BASELINE_VARIANT:
            rep.classification = "baseline"
        elif len(scales) >= 2:
            rep.classification = classify(per_scale_median.get(scales[0]),
                                          per_scale_median.get(scales[-1]), delta)
        reports.append(rep)
    return reports


def report_csv(reports: list[VariantReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant", "scale", "min_val_loss", "ceg_mode",
                     "ceg_median", "ceg_min", "ceg_max", "classification"])
    fmt = lambda x: "" if x is None else f"{x:.6g}"
    for rep in reports:
        for scale, cell in cell_rows(rep):
            writer.writerow([rep.variant, scale, fmt(cell.min_val_loss), cell.ceg_mode,
                             fmt(cell.ceg_median), fmt(cell.ceg_min), fmt(cell.ceg_max),
                             rep.classification])
    return buf.getvalue()


def cell_rows(rep: VariantReport):
    return sorted(rep.cells.items())


def report_markdown(reports: list[VariantReport], delta: float = 0.05,
                    notes: Optional[list[str]] = None) -> str:
    lines = [
        "# Compute-equivalent gain report",
        "",
        f"Classification threshold delta = {delta}. CEG is the cost ratio",
        "(active params per token x tokens) to reach equal validation loss;",
        "median over seeds with [min, max] range. Parameter counts include",
        "embeddings; the output head is untied.",
        "",
        "| variant | scale | min val loss | mode | CEG median | CEG range | classification |",
        "|---|---|---|---|---|---|---|",
    ]
    fmt = lambda x: "-" if x is None else f"{x:.3f}"
    for rep in reports:
        for scale, cell in cell_rows(rep):
            rng = "-"
            if cell.ceg_min is not None:
                rng = f"[{cell.ceg_min:.3f}, {cell.ceg_max:.3f}]"
            flag = f" ({cell.diverged} diverged)" if cell.diverged else ""
            lines.append(
                f"| {rep.variant} | {scale} | {fmt(cell.min_val_loss)}{flag} | {cell.ceg_mode} "
                f"| {fmt(cell.ceg_median)} | {rng} | {rep.classification} |"
            )
    if notes:
        lines += [""] + [f"- {n}" for n in notes]
    return "\n".join(lines) + "\n"
