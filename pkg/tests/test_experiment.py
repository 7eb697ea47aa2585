"""Experiment spec validation, suite resumability, analysis outputs, CLI."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from ceglab.experiment import (
    VARIANTS,
    ExperimentSpec,
    SpecError,
    analyze_suite,
    cell_dir,
    load_suite_logs,
    run_suite,
)
from ceglab.runlog import RunLog


def spec_dict(tmp_path, **overrides):
    base = {
        "corpus": str(tmp_path / "corpus.txt"),
        "synthesize_mb": 0.08,
        "corpus_seed": 1,
        "val_fraction": 0.1,
        "variants": ["baseline", "layer_norm"],
        "seeds": [0, 1],
        "scales": {
            "a": {
                "model": {"n_layer": 1, "n_head": 2, "d_model": 16,
                          "vocab_size": 256, "context_len": 16},
                "train": {"total_steps": 8, "batch_size": 2, "eval_interval": 4,
                          "eval_batches": 1, "warmup_steps": 1},
            },
            "b": {
                "model": {"n_layer": 1, "n_head": 2, "d_model": 32,
                          "vocab_size": 256, "context_len": 16},
                "train": {"total_steps": 8, "batch_size": 2, "eval_interval": 4,
                          "eval_batches": 1, "warmup_steps": 1},
            },
        },
    }
    base.update(overrides)
    return base


def make_spec(tmp_path, **overrides) -> ExperimentSpec:
    return ExperimentSpec(**spec_dict(tmp_path, **overrides))


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------


def test_variant_registry_covers_studied_mechanisms():
    assert set(VARIANTS) == {"baseline", "layer_norm", "rope", "blocked_attn",
                             "sparse_attn", "mqa", "ln_rope_blocked"}
    assert VARIANTS["baseline"] == {}


def test_spec_requires_baseline(tmp_path):
    with pytest.raises(SpecError):
        make_spec(tmp_path, variants=["layer_norm"])


def test_spec_requires_two_scales(tmp_path):
    d = spec_dict(tmp_path)
    d["scales"].pop("b")
    with pytest.raises(SpecError):
        ExperimentSpec(**d)


def test_spec_rejects_unknown_variant(tmp_path):
    with pytest.raises(SpecError):
        make_spec(tmp_path, variants=["baseline", "flash"])


def test_spec_json_round_trip(tmp_path):
    spec = make_spec(tmp_path)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    loaded = ExperimentSpec.from_json(path)
    assert loaded.to_dict() == spec.to_dict()
    assert loaded.spec_hash == spec.spec_hash


def test_variant_configs_differ_only_in_toggles(tmp_path):
    spec = make_spec(tmp_path)
    base = spec.model_config("a", "baseline", 0).to_dict()
    ln = spec.model_config("a", "layer_norm", 0).to_dict()
    diff = {k for k in base if base[k] != ln[k]}
    assert diff == {"norm_scheme"}


# ---------------------------------------------------------------------------
# suite execution
# ---------------------------------------------------------------------------


def test_suite_runs_grid_and_is_resumable(tmp_path):
    spec = make_spec(tmp_path)
    out = tmp_path / "out"
    result = run_suite(spec, out, echo=lambda *_: None)
    assert len(result["cells"]) == 8  # 2 scales x 2 variants x 2 seeds
    assert all(e["status"] == "complete" for e in result["cells"])

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["finished"]
    assert manifest["spec_hash"] == spec.spec_hash

    log_path = cell_dir(out, "a", "baseline", 0) / "run.jsonl"
    before = log_path.read_bytes()
    result2 = run_suite(spec, out, echo=lambda *_: None)
    assert all(e["status"] == "cached" for e in result2["cells"])
    assert log_path.read_bytes() == before  # byte-identical on resume


def test_suite_invalidates_cell_on_config_change(tmp_path):
    spec = make_spec(tmp_path)
    out = tmp_path / "out"
    run_suite(spec, out, echo=lambda *_: None)
    changed = spec_dict(tmp_path)
    changed["scales"]["a"]["train"]["lr_max"] = 0.0005
    spec2 = ExperimentSpec(**changed)
    result = run_suite(spec2, out, echo=lambda *_: None)
    statuses = {(e["scale"], e["variant"], e["seed"]): e["status"] for e in result["cells"]}
    assert statuses[("a", "baseline", 0)] == "complete"  # re-run
    assert statuses[("b", "baseline", 0)] == "cached"    # untouched scale


def test_suite_redoes_truncated_cell(tmp_path):
    spec = make_spec(tmp_path)
    out = tmp_path / "out"
    run_suite(spec, out, echo=lambda *_: None)
    log_path = cell_dir(out, "a", "baseline", 1) / "run.jsonl"
    lines = log_path.read_text().splitlines()
    log_path.write_text("\n".join(lines[:-1]) + "\n")  # drop trailer
    result = run_suite(spec, out, echo=lambda *_: None)
    statuses = {(e["scale"], e["variant"], e["seed"]): e["status"] for e in result["cells"]}
    assert statuses[("a", "baseline", 1)] == "complete"
    assert RunLog.from_jsonl(log_path).is_complete(8)


def test_suite_writes_checkpoints(tmp_path):
    from ceglab.checkpoint import load_checkpoint

    spec = make_spec(tmp_path, seeds=[0])
    out = tmp_path / "out"
    run_suite(spec, out, echo=lambda *_: None)
    model = load_checkpoint(cell_dir(out, "a", "layer_norm", 0) / "model.ckpt")
    assert model.config.norm_scheme == "layer_norm"


def test_analyze_outputs(tmp_path):
    spec = make_spec(tmp_path)
    out = tmp_path / "out"
    run_suite(spec, out, echo=lambda *_: None)
    analyze_suite(out)
    assert (out / "report.md").exists()
    csv_lines = (out / "report.csv").read_text().splitlines()
    assert csv_lines[0] == ("variant,scale,min_val_loss,ceg_mode,"
                            "ceg_median,ceg_min,ceg_max,classification")
    assert len(csv_lines) == 1 + 4  # 2 variants x 2 scales
    curves = (out / "loss_curves.csv").read_text().splitlines()
    assert curves[0] == "scale,variant,seed,step,val_loss"
    assert len(curves) == 1 + 8 * 3  # 8 runs x (step0 + 2 evals)
    logs = load_suite_logs(out)
    assert len(logs) == 8


def test_analyze_without_suite_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        analyze_suite(tmp_path / "nothing")


# ---------------------------------------------------------------------------
# CLI surface
# ---------------------------------------------------------------------------


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "ceglab.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


def test_cli_usage_error_exit_code():
    proc = run_cli("train", "--spec", "missing.json")  # missing required flags
    assert proc.returncode == 1


def test_cli_runtime_error_exit_code(tmp_path):
    proc = run_cli("suite", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path))
    assert proc.returncode == 2


def test_cli_prepare_data(tmp_path):
    out = tmp_path / "corpus.txt"
    proc = run_cli("prepare-data", "--synthesize-mb", "0.05", "--seed", "3",
                   "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    assert out.stat().st_size >= 50_000
    assert "sha256" in proc.stdout


def test_cli_train_and_analyze_cell(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec_dict(tmp_path)))
    out = tmp_path / "out"
    for variant in ("baseline", "layer_norm"):
        for scale in ("a", "b"):
            for seed in ("0",):
                proc = run_cli("train", "--spec", str(spec_path), "--scale", scale,
                               "--variant", variant, "--seed", seed, "--out", str(out))
                assert proc.returncode == 0, proc.stderr
    assert (cell_dir(out, "a", "baseline", 0) / "run.jsonl").exists()
    proc = run_cli("train", "--spec", str(spec_path), "--scale", "zzz",
                   "--variant", "baseline", "--seed", "0", "--out", str(out))
    assert proc.returncode == 1


def test_cli_verify_passes():
    proc = run_cli("verify")
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "8/8 checks passed" in proc.stdout


def test_suite_parallel_jobs(tmp_path):
    spec = make_spec(tmp_path, seeds=[0])
    out = tmp_path / "out"
    result = run_suite(spec, out, jobs=2, echo=lambda *_: None)
    assert len(result["cells"]) == 4
    assert all(e["status"] == "complete" for e in result["cells"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["finished"]
    # parallel run agrees bit-for-bit with a sequential rerun of the same cells
    sequential = run_suite(spec, tmp_path / "out_seq", jobs=1, echo=lambda *_: None)
    for entry in sequential["cells"]:
        par = cell_dir(out, entry["scale"], entry["variant"], entry["seed"]) / "run.jsonl"
        seq = cell_dir(tmp_path / "out_seq", entry["scale"], entry["variant"],
                       entry["seed"]) / "run.jsonl"
        assert par.read_bytes() == seq.read_bytes()


def test_suite_records_failed_cells(tmp_path):
    d = spec_dict(tmp_path, seeds=[0])
    d["scales"]["b"]["model"]["context_len"] = 65536  # larger than the corpus
    spec = ExperimentSpec(**d)
    result = run_suite(spec, tmp_path / "out", echo=lambda *_: None)
    statuses = {(e["scale"], e["variant"]): e["status"] for e in result["cells"]}
    assert statuses[("a", "baseline")] == "complete"
    assert statuses[("b", "baseline")] == "failed"
    assert result["failed"]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    failed = [e for e in manifest["cells"] if e["status"] == "failed"]
    assert failed and "error" in failed[0]


def test_cli_verify_failure_exit_code(monkeypatch):
    from ceglab import cli, verify

    def failing_battery(echo=print):
        return [verify.CheckResult("stub", False, "forced failure")], 0.01

    monkeypatch.setattr("ceglab.verify.run_battery", failing_battery)
    assert cli.main(["verify"]) == 3


def test_resume_yields_byte_identical_report(tmp_path):
    spec = make_spec(tmp_path, seeds=[0])
    out = tmp_path / "out"
    run_suite(spec, out, echo=lambda *_: None)
    analyze_suite(out)
    first = {name: (out / name).read_bytes()
             for name in ("report.md", "report.csv", "loss_curves.csv")}
    run_suite(spec, out, echo=lambda *_: None)  # all cells cached
    analyze_suite(out)
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob, name
