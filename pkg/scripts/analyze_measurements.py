#!/usr/bin/env python3
"""Render human-readable scaling and overhead tables from measurement CSVs.

Defaults to the sample series under data/, which records epoch times for
a multi-node training run (4 to 32 nodes) and two throughput/memory
benchmark pairs measured with and without the container runtime.  The
CLI (`stowage scale-report`, `stowage bench overhead`) emits the same
numbers as machine-readable CSV; this script is the pretty-printed view
and doubles as a usage example for the library API.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from stowage.bench import (
    overhead_report,
    plot_data,
    read_overhead_csv,
    read_scaling_csv,
    scaling_report,
)

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def show_scaling(path: Path, baseline: int | None) -> None:
    series = read_scaling_csv(path)
    report = scaling_report(series, baseline_nodes=baseline)
    times = {r.nodes: r.epoch_time_s for r in series}
    print(f"scaling series from {path}")
    print(f"baseline: {report.baseline_nodes} nodes")
    print(f"{'nodes':>6} {'epoch_time_s':>13} {'speedup':>9} "
          f"{'efficiency':>11} {'linear':>8}")
    for row in report.rows:
        print(f"{row.nodes:>6} {times[row.nodes]:>13.1f} "
              f"{row.speedup:>9.4f} {row.efficiency:>11.4f} "
              f"{row.linear_speedup:>8.1f}")


def show_overhead(path: Path, threshold: float) -> None:
    records = read_overhead_csv(path)
    report = overhead_report(records, threshold=threshold)
    print(f"overhead pairs from {path}")
    print(f"flag threshold: {report.threshold:.1%} relative throughput delta")
    print(f"{'benchmark':<12} {'tp_delta':>9} {'mem_delta_gb':>13} "
          f"{'flagged':>8}")
    for row in report.rows:
        tp = "" if row.throughput_delta is None else f"{row.throughput_delta:+.2%}"
        mem = "" if row.mem_delta_gb is None else f"{row.mem_delta_gb:+.2f}"
        print(f"{row.benchmark_name:<12} {tp:>9} {mem:>13} "
              f"{'YES' if row.flagged else 'no':>8}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="print scaling and overhead tables from measurement "
                    "CSVs")
    parser.add_argument("--scaling", type=Path,
                        default=DATA_DIR / "scaling_epoch_times.csv",
                        help="CSV with columns nodes,epoch_time_s")
    parser.add_argument("--overhead", type=Path,
                        default=DATA_DIR / "overhead_pairs.csv",
                        help="CSV with columns benchmark,tp_with,tp_without,"
                             "mem_with,mem_without")
    parser.add_argument("--baseline", type=int, default=None,
                        help="baseline node count (default: smallest)")
    parser.add_argument("--threshold", type=float, default=0.02,
                        help="relative throughput delta that raises a flag")
    parser.add_argument("--plot-data", type=Path, metavar="FILE",
                        help="also write measured-vs-linear speedup CSV here")
    args = parser.parse_args(argv)

    show_scaling(args.scaling, args.baseline)
    print()
    show_overhead(args.overhead, args.threshold)
    if args.plot_data is not None:
        report = scaling_report(read_scaling_csv(args.scaling),
                                baseline_nodes=args.baseline)
        args.plot_data.write_text(plot_data(report))
        print(f"\nplot data written to {args.plot_data}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
