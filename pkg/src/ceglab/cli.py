"""Command-line entry point.

Subcommands: prepare-data, train, suite, analyze, verify.
Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ceglab",
                     description="micro GPT variant lab with compute-equivalent-gain analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare-data", parents=[], help="write a training corpus file")
    prep.add_argument("--out", required=True, help="corpus file to write")
    src = prep.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="copy bytes from an existing text file")
    src.add_argument("--synthesize-mb", type=float,
                     help="generate deterministic pseudo-text of this size")
    prep.add_argument("--seed", type=int, default=0, help="synthesis seed")

    tr = sub.add_parser("train", help="run one (scale, variant, seed) cell")
    tr.add_argument("--spec", required=True, help="experiment spec JSON")
    tr.add_argument("--scale", required=True)
    tr.add_argument("--variant", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True, help="suite output directory")

    su = sub.add_parser("suite", help="run the full scale x variant x seed grid (resumable)")
    su.add_argument("--spec", required=True)
    su.add_argument("--out", required=True)
    su.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    an = sub.add_parser("analyze", help="CEG report + plot data from suite logs")
    an.add_argument("--out", required=True, help="suite output directory")
    an.add_argument("--no-interpolation", action="store_true",
                    help="use first-checkpoint steps instead of interpolating")
    an.add_argument("--delta", type=float, default=0.05,
                    help="classification threshold around CEG 1.0")

    sub.add_parser("verify", help="run the fast property battery")
    return parser


def cmd_prepare_data(args) -> int:
    from .data import load_corpus

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.input:
        out.write_bytes(Path(args.input).read_bytes())
    else:
        from .textgen import synthesize_corpus

        out.write_bytes(synthesize_corpus(int(args.synthesize_mb * 1_000_000), args.seed))
    corpus = load_corpus(out)
    print(f"{out}: {len(corpus.data)} bytes, sha256 {corpus.sha256}")
    return 0


def cmd_train(args) -> int:
    from .experiment import ExperimentSpec, load_dataset, run_cell

    spec = ExperimentSpec.from_json(args.spec)
    if args.scale not in spec.scales:
        print(f"error: unknown scale {args.scale!r}; spec has {sorted(spec.scales)}",
              file=sys.stderr)
        return 1
    if args.variant not in spec.variants:
        print(f"error: unknown variant {args.variant!r}; spec has {spec.variants}",
              file=sys.stderr)
        return 1
    entry = run_cell(spec, args.scale, args.variant, args.seed, args.out,
                     load_dataset(spec))
    print(f"{entry['scale']}/{entry['variant']}/seed{entry['seed']}: {entry['status']} "
          f"-> {Path(args.out) / entry['log']}")
    return 0 if entry["status"] in ("complete", "cached", "diverged") else 2


def cmd_suite(args) -> int:
    from .experiment import ExperimentSpec, run_suite

    spec = ExperimentSpec.from_json(args.spec)
    result = run_suite(spec, args.out, jobs=args.jobs)
    if result["failed"]:
        print(f"{len(result['failed'])} cells failed", file=sys.stderr)
        return 2
    print(f"suite complete: {len(result['cells'])} cells under {args.out}")
    return 0


def cmd_analyze(args) -> int:
    from .experiment import analyze_suite

    analyze_suite(args.out, delta=args.delta, interpolate=not args.no_interpolation)
    print(f"wrote {args.out}/report.md, report.csv, loss_curves.csv")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_battery

    results, _ = run_battery()
    return 0 if all(r.passed for r in results) else 3


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "prepare-data": cmd_prepare_data,
        "train": cmd_train,
        "suite": cmd_suite,
        "analyze": cmd_analyze,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
