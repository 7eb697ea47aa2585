#!/usr/bin/env python3
"""Wall-clock comparison of the naive and blocked attention kernels.

Times forward-only and forward+backward at several context lengths on
the mini-scale head geometry. The blocked kernel skips fully masked
key blocks, which is where its causal-mask advantage comes from.
"""

import argparse
import time

import numpy as np

from ceglab.attention import attention_blocked, attention_naive, causal_mask
from ceglab.tensor import Tape, Tensor, tsum


def median_time(fn, repeats):
    fn()  # warm
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def bench_context(n, batch, heads, d_head, block, repeats):
    rng = np.random.default_rng(0)
    shape = (batch, heads, n, d_head)
    q, k, v = (rng.normal(size=shape).astype(np.float32) for _ in range(3))
    mask = causal_mask(n)

    def fwd(kernel, **kw):
        return lambda: kernel(q, k, v, mask, **kw)

    def fwd_bwd(kernel, **kw):
        def run():
            qt = Tensor(q, requires_grad=True)
            kt = Tensor(k, requires_grad=True)
            vt = Tensor(v, requires_grad=True)
            with Tape() as tape:
                tape.backward(tsum(kernel(qt, kt, vt, mask, **kw)))
        return run

    rows = {}
    rows["naive fwd"] = median_time(fwd(attention_naive), repeats)
    rows["blocked fwd"] = median_time(
        fwd(attention_blocked, block_rows=block, block_cols=block), repeats)
    rows["naive fwd+bwd"] = median_time(fwd_bwd(attention_naive), repeats)
    rows["blocked fwd+bwd"] = median_time(
        fwd_bwd(attention_blocked, block_rows=block, block_cols=block), repeats)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--contexts", type=int, nargs="+", default=[128, 256, 512, 1024])
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--heads", type=int, default=6)
    parser.add_argument("--d-head", type=int, default=40)
    parser.add_argument("--block", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=9)
    args = parser.parse_args()

    print(f"batch={args.batch} heads={args.heads} d_head={args.d_head} "
          f"block={args.block}x{args.block} (median of {args.repeats})")
    print(f"{'n':>6} {'naive fwd':>12} {'blocked fwd':>12} {'ratio':>7} "
          f"{'naive f+b':>12} {'blocked f+b':>12} {'ratio':>7}")
    for n in args.contexts:
        r = bench_context(n, args.batch, args.heads, args.d_head, args.block, args.repeats)
        print(f"{n:>6} {r['naive fwd']*1e3:>10.2f}ms {r['blocked fwd']*1e3:>10.2f}ms "
              f"{r['blocked fwd']/r['naive fwd']:>7.2f} "
              f"{r['naive fwd+bwd']*1e3:>10.2f}ms {r['blocked fwd+bwd']*1e3:>10.2f}ms "
              f"{r['blocked fwd+bwd']/r['naive fwd+bwd']:>7.2f}")


if __name__ == "__main__":
    main()
