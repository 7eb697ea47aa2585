#!/usr/bin/env python3
"""Generate a deterministic pseudo-text corpus file.

Equivalent to `ceglab prepare-data --synthesize-mb ...`; kept as a
standalone script for quick corpus experiments.
"""

import argparse
import hashlib
from pathlib import Path

from ceglab.textgen import synthesize_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size-mb", type=float, default=4.0)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default="data/corpus.txt")
    args = parser.parse_args()

    data = synthesize_corpus(int(args.size_mb * 1_000_000), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"{out}: {len(data)} bytes, sha256 {hashlib.sha256(data).hexdigest()}")


if __name__ == "__main__":
    main()
