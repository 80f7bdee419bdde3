#!/usr/bin/env python3
"""Sweep the per-domain batch size over [4, 8, 16, 32, 64, 100].

The degradation operator mixes rows within a batch, so its usefulness is
expected to grow with batch size; this script measures that curve on the
synthetic task.  Artifacts land under --out (default results/batch_sweep):
rows.csv per run, summary.json mean test accuracy per size.
"""

import argparse
import sys
import time
from pathlib import Path

from latentaug.harness import (
    batch_size_sweep,
    export_report,
    grid_summary_rows,
    load_config_file,
    summarize_sweep,
)

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "batch_sweep.cfg"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(DEFAULT_CONFIG))
    parser.add_argument("--out", default="results/batch_sweep")
    parser.add_argument("--seeds", type=int, default=5, help="seeds per size")
    args = parser.parse_args()

    base = load_config_file(args.config)
    t0 = time.perf_counter()

    def progress(i, n, cfg, report):
        print(
            f"[{i:3d}/{n}] B={cfg.batch_size:<4d} seed {cfg.seed}  "
            f"test_acc {report.final['test_acc']:.4f}",
            flush=True,
        )

    runs = batch_size_sweep(base, n_seeds=args.seeds, progress=progress)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_report(grid_summary_rows(runs), out / "rows.csv", fmt="csv")
    export_report(summarize_sweep(runs), out / "summary.json", fmt="json")

    print(f"\n{len(runs)} runs in {wall:.0f}s -> {out}")
    for size, stats in summarize_sweep(runs).items():
        print(f"  B={size:>4s} {stats['mean_test_acc']:.4f} +/- {stats['sd_test_acc']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
