#!/usr/bin/env python3
"""Paired phantom benchmark: both variants, same data, same seeds.

    python3 scripts/phantom_benchmark.py --seeds 0,1,2 --epochs 30
"""

import argparse

from unetdr.benchmark import BenchmarkConfig, run_benchmark, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    d = BenchmarkConfig()
    ap.add_argument("--seeds", default=",".join(map(str, d.seeds)))
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--base-channels", type=int, default=d.base_channels)
    ap.add_argument("--extents", default=",".join(map(str, d.extents)))
    ap.add_argument("--n-train", type=int, default=d.n_train)
    ap.add_argument("--n-val", type=int, default=d.n_val)
    ap.add_argument("--data-seed", type=int, default=d.data_seed)
    ap.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)
    args = ap.parse_args()

    cfg = BenchmarkConfig(
        extents=tuple(int(e) for e in args.extents.split(",")),
        n_train=args.n_train,
        n_val=args.n_val,
        data_seed=args.data_seed,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        epochs=args.epochs,
        base_channels=args.base_channels,
        dtype=args.dtype,
    )
    print("variant\tseed\tparams\tbest_val_dc\tbest_epoch\tseconds")

    def show(r):
        print(f"{r.variant}\t{r.seed}\t{r.n_params}\t{r.best_val_dc:.4f}\t{r.best_epoch}\t{r.seconds:.1f}", flush=True)

    results = run_benchmark(cfg, progress=show)
    for variant, mean in summarize(results).items():
        print(f"# mean best val DC {variant}: {mean:.4f}")


if __name__ == "__main__":
    main()
