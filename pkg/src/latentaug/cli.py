"""Command-line front end for the experiment harness.

Subcommands
-----------
run          train one configuration and write/print its report
grid         run the ablation grid (operator kinds x loss variants + baseline)
sweep-batch  re-run one configuration over the batch-size ladder
metrics      recompute representation metrics from a saved latent dump

Every command reads a flat ``key=value`` config file (unknown keys rejected)
and honours ``--seed`` as an override and ``--format json|csv`` for outputs.

Exit codes: 0 success; 2 configuration or input error; 3 numerical failure
(non-finite values met during training).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .degrade_restore import read_latent_dump
from .errors import LatentAugError, NumericalError
from .harness import (
    GridRun,
    batch_size_sweep,
    export_report,
    grid_summary_rows,
    load_config_file,
    run_ablation_grid,
    run_experiment,
    summarize_grid,
    summarize_sweep,
)
from .metrics import alignment, uniformity

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentaug",
        description="Latent degradation/restoration training experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one configuration")
    run_p.add_argument("--config", required=True, help="key=value config file")
    run_p.add_argument("--out", help="directory for the report (stdout if omitted)")

    grid_p = sub.add_parser("grid", help="run the ablation grid")
    grid_p.add_argument("--config", required=True, help="key=value base config file")
    grid_p.add_argument("--out", required=True, help="directory for rows and summary")

    sweep_p = sub.add_parser("sweep-batch", help="sweep the per-domain batch size")
    sweep_p.add_argument("--config", required=True, help="key=value base config file")
    sweep_p.add_argument("--out", required=True, help="directory for rows and summary")

    metrics_p = sub.add_parser("metrics", help="metrics from a saved latent dump")
    metrics_p.add_argument("--latents", required=True, help="latent dump file")
    metrics_p.add_argument("--out", required=True, help="output file")

    for p in (run_p, grid_p, sweep_p, metrics_p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--format", choices=("json", "csv"), default="json", dest="fmt",
            help="output format (default json)",
        )
    return parser


def _load(args, seed_field: str = "seed"):
    cfg = load_config_file(args.config)
    if args.seed is not None:
        cfg = replace(cfg, **{seed_field: args.seed})
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    if args.out is None:
        report = run_experiment(cfg)
        if args.fmt == "json":
            sys.stdout.write(report.to_json())
        else:
            from .harness import rows_to_csv, summary_row

            sys.stdout.write(rows_to_csv([summary_row(cfg, report)]))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(cfg, out_dir=out)
    path = out / f"report.{args.fmt}"
    export_report(report, path, fmt=args.fmt)
    print(f"run: test_acc {report.final['test_acc']:.4f}  report {path}")
    return EXIT_OK


def _progress(i: int, n: int, cfg, report) -> None:
    print(
        f"[{i:3d}/{n}] {cfg.variant.value:8s} {cfg.operator_kind.value:8s} "
        f"seed {cfg.seed} held_out {cfg.held_out_domain}  "
        f"test_acc {report.final['test_acc']:.4f}",
        flush=True,
    )


def _write_rows_and_summary(runs: list[GridRun], summary: dict, out: Path, fmt: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    export_report(grid_summary_rows(runs), out / "rows.csv", fmt="csv")
    if fmt == "json":
        export_report(summary, out / "summary.json", fmt="json")
    else:
        rows = [{"cell": k, **v} for k, v in summary.items()]
        import csv as _csv
        import io as _io

        buf = _io.StringIO()
        writer = _csv.writer(buf, lineterminator="\n")
        writer.writerow(["cell", "mean_test_acc", "sd_test_acc", "n"])
        for row in rows:
            writer.writerow([
                row["cell"],
                f"{row['mean_test_acc']:.17g}",
                f"{row['sd_test_acc']:.17g}",
                row["n"],
            ])
        (out / "summary.csv").write_text(buf.getvalue())


def _cmd_grid(args) -> int:
    cfg = load_config_file(args.config)
    seed_base = args.seed if args.seed is not None else 0
    runs = run_ablation_grid(cfg, seed_base=seed_base, progress=_progress)
    summary = summarize_grid(runs)
    _write_rows_and_summary(runs, summary, Path(args.out), args.fmt)
    for cell, stats in summary.items():
        print(f"{cell:22s} {stats['mean_test_acc']:.4f} +/- {stats['sd_test_acc']:.4f}  (n={stats['n']})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config_file(args.config)
    seed_base = args.seed if args.seed is not None else 0
    runs = batch_size_sweep(cfg, seed_base=seed_base, progress=_progress)
    summary = summarize_sweep(runs)
    _write_rows_and_summary(runs, summary, Path(args.out), args.fmt)
    for size, stats in summary.items():
        print(f"B={size:>4s} {stats['mean_test_acc']:.4f} +/- {stats['sd_test_acc']:.4f}  (n={stats['n']})")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    dump = read_latent_dump(args.latents)
    rows = []
    for name, feats in (
        ("original", dump.z),
        ("degraded", dump.z_degraded),
        ("restored", dump.z_restored),
    ):
        rows.append({
            "representation": name,
            "alignment": alignment(feats, dump.classes),
            "uniformity": uniformity(feats),
        })
    out = Path(args.out)
    if args.fmt == "json":
        import json

        payload = {"seed": dump.seed, "step": dump.step, "metrics": rows}
        out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        import csv as _csv
        import io as _io

        buf = _io.StringIO()
        writer = _csv.writer(buf, lineterminator="\n")
        writer.writerow(["representation", "alignment", "uniformity"])
        for row in rows:
            writer.writerow([
                row["representation"],
                f"{row['alignment']:.17g}",
                f"{row['uniformity']:.17g}",
            ])
        out.write_text(buf.getvalue())
    for row in rows:
        print(f"{row['representation']:9s} align {row['alignment']:.6f}  uniform {row['uniformity']:.6f}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "grid": _cmd_grid,
    "sweep-batch": _cmd_sweep,
    "metrics": _cmd_metrics,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LatentAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
