"""Scaling and overhead analysis, plus a driver that measures both sides.

Scaling: given epoch times per node count, speedup at n is
T(baseline)/T(n) and parallel efficiency is that speedup divided by the
node ratio n/baseline, so the baseline row is exactly 1/1 and a perfectly
linear series stays at efficiency 1.

Overhead: relative throughput delta (with - without)/without and absolute
free-memory delta (without - with, positive means the container cost
memory).  Deltas beyond a configurable threshold get flagged.

measure_pair runs one workload natively and containerized (never
interleaved), parses a throughput figure from its output with a
caller-supplied regex, samples free memory while it runs, and keeps the
median over repetitions.  Memory figures are GiB (2**30 bytes).
"""

from __future__ import annotations

import csv
import io
import json
import re
import statistics
import subprocess
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from . import runtime
from .errors import (
    DuplicateNodeCount,
    IoFailure,
    MissingBaseline,
    NoMeasurements,
    PatternNotFound,
    WorkloadFailed,
)

GIB = 2 ** 30
DEFAULT_THRESHOLD = 0.02


# ---------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class ScalingRecord:
    nodes: int
    epoch_time_s: float

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ValueError("node count must be positive")
        if self.epoch_time_s <= 0:
            raise ValueError("epoch time must be positive")


@dataclass(frozen=True)
class ScalingRow:
    nodes: int
    speedup: float
    efficiency: float
    linear_speedup: float


@dataclass(frozen=True)
class ScalingReport:
    baseline_nodes: int
    rows: tuple[ScalingRow, ...]


def scaling_report(series: list[ScalingRecord],
                   baseline_nodes: int | None = None) -> ScalingReport:
    """Speedup and efficiency for every node count in the series.

    baseline_nodes defaults to the smallest node count present.
    """
    if not series:
        raise MissingBaseline("empty scaling series")
    counts = [r.nodes for r in series]
    dupes = {n for n in counts if counts.count(n) > 1}
    if dupes:
        raise DuplicateNodeCount(
            f"node counts appear more than once: {sorted(dupes)}"
        )
    if baseline_nodes is None:
        baseline_nodes = min(counts)
    by_nodes = {r.nodes: r.epoch_time_s for r in series}
    if baseline_nodes not in by_nodes:
        raise MissingBaseline(
            f"series has no measurement at the baseline of {baseline_nodes} "
            f"nodes (available: {sorted(by_nodes)})"
        )
    t_base = by_nodes[baseline_nodes]
    rows = []
    for nodes in sorted(by_nodes):
        speedup = t_base / by_nodes[nodes]
        linear = nodes / baseline_nodes
        rows.append(ScalingRow(nodes=nodes, speedup=speedup,
                               efficiency=speedup / linear,
                               linear_speedup=linear))
    return ScalingReport(baseline_nodes=baseline_nodes, rows=tuple(rows))


def read_scaling_csv(path: str | Path) -> list[ScalingRecord]:
    """Read measurement input with header ``nodes,epoch_time_s``."""
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            return [ScalingRecord(nodes=int(row["nodes"]),
                                  epoch_time_s=float(row["epoch_time_s"]))
                    for row in reader]
    except OSError as exc:
        raise IoFailure(f"cannot read scaling series {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailure(
            f"{path}: expected columns nodes,epoch_time_s ({exc})"
        ) from exc


def scaling_report_to_csv(report: ScalingReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["baseline_nodes", "nodes", "speedup", "efficiency",
                     "linear_speedup"])
    for row in report.rows:
        writer.writerow([report.baseline_nodes, row.nodes, row.speedup,
                         row.efficiency, row.linear_speedup])
    return out.getvalue()


def scaling_report_from_csv(text: str) -> ScalingReport:
    reader = csv.DictReader(io.StringIO(text))
    rows, baseline = [], None
    for record in reader:
        baseline = int(record["baseline_nodes"])
        rows.append(ScalingRow(nodes=int(record["nodes"]),
                               speedup=float(record["speedup"]),
                               efficiency=float(record["efficiency"]),
                               linear_speedup=float(record["linear_speedup"])))
    if baseline is None:
        raise MissingBaseline("report CSV holds no rows")
    return ScalingReport(baseline_nodes=baseline, rows=tuple(rows))


def scaling_report_to_json(report: ScalingReport) -> str:
    return json.dumps({
        "baseline_nodes": report.baseline_nodes,
        "rows": [{"nodes": r.nodes, "speedup": r.speedup,
                  "efficiency": r.efficiency,
                  "linear_speedup": r.linear_speedup} for r in report.rows],
    }, indent=2)


def scaling_report_from_json(text: str) -> ScalingReport:
    data = json.loads(text)
    return ScalingReport(
        baseline_nodes=data["baseline_nodes"],
        rows=tuple(ScalingRow(**row) for row in data["rows"]),
    )


def plot_data(report: ScalingReport) -> str:
    """Two-line plot input: measured curve and the linear reference."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["nodes", "measured_speedup", "linear_speedup"])
    for row in report.rows:
        writer.writerow([row.nodes, row.speedup, row.linear_speedup])
    return out.getvalue()


# ---------------------------------------------------------------------------
# overhead

@dataclass(frozen=True)
class OverheadRecord:
    benchmark_name: str
    throughput_with: float | None = None
    throughput_without: float | None = None
    free_mem_with_gb: float | None = None
    free_mem_without_gb: float | None = None

    def __post_init__(self) -> None:
        for name in ("throughput_with", "throughput_without",
                     "free_mem_with_gb", "free_mem_without_gb"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")

    def has_throughput(self) -> bool:
        return (self.throughput_with is not None
                and self.throughput_without is not None)

    def has_memory(self) -> bool:
        return (self.free_mem_with_gb is not None
                and self.free_mem_without_gb is not None)


@dataclass(frozen=True)
class OverheadRow:
    benchmark_name: str
    throughput_delta: float | None
    mem_delta_gb: float | None
    flagged: bool


@dataclass(frozen=True)
class OverheadReport:
    threshold: float
    rows: tuple[OverheadRow, ...]


def overhead_report(records: list[OverheadRecord],
                    threshold: float = DEFAULT_THRESHOLD) -> OverheadReport:
    """Relative throughput deltas and absolute free-memory deltas."""
    rows = []
    for record in records:
        tp_delta = mem_delta = None
        if record.has_throughput():
            tp_delta = ((record.throughput_with - record.throughput_without)
                        / record.throughput_without)
        if record.has_memory():
            mem_delta = record.free_mem_without_gb - record.free_mem_with_gb
        if tp_delta is None and mem_delta is None:
            continue
        flagged = tp_delta is not None and abs(tp_delta) > threshold
        rows.append(OverheadRow(benchmark_name=record.benchmark_name,
                                throughput_delta=tp_delta,
                                mem_delta_gb=mem_delta, flagged=flagged))
    if not rows:
        raise NoMeasurements(
            "no record carries a complete throughput or memory pair"
        )
    return OverheadReport(threshold=threshold, rows=tuple(rows))


def read_overhead_csv(path: str | Path) -> list[OverheadRecord]:
    """Read measurement input with header
    ``benchmark,tp_with,tp_without,mem_with,mem_without`` (blank = absent).
    """
    def num(cell: str | None) -> float | None:
        return float(cell) if cell not in (None, "") else None

    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            return [OverheadRecord(benchmark_name=row["benchmark"],
                                   throughput_with=num(row.get("tp_with")),
                                   throughput_without=num(row.get("tp_without")),
                                   free_mem_with_gb=num(row.get("mem_with")),
                                   free_mem_without_gb=num(row.get("mem_without")))
                    for row in reader]
    except OSError as exc:
        raise IoFailure(f"cannot read overhead records {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailure(
            f"{path}: expected columns benchmark,tp_with,tp_without,"
            f"mem_with,mem_without ({exc})"
        ) from exc


def overhead_report_to_csv(report: OverheadReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["benchmark", "throughput_delta", "mem_delta_gb",
                     "flagged", "threshold"])
    for row in report.rows:
        writer.writerow([
            row.benchmark_name,
            "" if row.throughput_delta is None else repr(row.throughput_delta),
            "" if row.mem_delta_gb is None else repr(row.mem_delta_gb),
            "true" if row.flagged else "false",
            repr(report.threshold),
        ])
    return out.getvalue()


def overhead_report_from_csv(text: str) -> OverheadReport:
    reader = csv.DictReader(io.StringIO(text))
    rows, threshold = [], DEFAULT_THRESHOLD
    for record in reader:
        threshold = float(record["threshold"])
        rows.append(OverheadRow(
            benchmark_name=record["benchmark"],
            throughput_delta=(float(record["throughput_delta"])
                              if record["throughput_delta"] else None),
            mem_delta_gb=(float(record["mem_delta_gb"])
                          if record["mem_delta_gb"] else None),
            flagged=record["flagged"] == "true",
        ))
    return OverheadReport(threshold=threshold, rows=tuple(rows))


def overhead_report_to_json(report: OverheadReport) -> str:
    return json.dumps({
        "threshold": report.threshold,
        "rows": [{"benchmark_name": r.benchmark_name,
                  "throughput_delta": r.throughput_delta,
                  "mem_delta_gb": r.mem_delta_gb,
                  "flagged": r.flagged} for r in report.rows],
    }, indent=2)


def overhead_report_from_json(text: str) -> OverheadReport:
    data = json.loads(text)
    return OverheadReport(
        threshold=data["threshold"],
        rows=tuple(OverheadRow(**row) for row in data["rows"]),
    )


# ---------------------------------------------------------------------------
# measurement driver

class _MemSampler(threading.Thread):
    """Track the minimum MemFree while a workload runs (conservative bound)."""

    def __init__(self, interval_s: float = 0.02):
        super().__init__(daemon=True)
        self.interval_s = interval_s
        self.min_free_bytes: int | None = None
        self._halt = threading.Event()

    @staticmethod
    def _read_free() -> int | None:
        try:
            with open("/proc/meminfo") as handle:
                for line in handle:
                    if line.startswith("MemFree:"):
                        return int(line.split()[1]) * 1024
        except (OSError, ValueError, IndexError):
            return None
        return None

    def run(self) -> None:
        while not self._halt.is_set():
            free = self._read_free()
            if free is not None:
                if self.min_free_bytes is None or free < self.min_free_bytes:
                    self.min_free_bytes = free
            self._halt.wait(self.interval_s)

    def finish(self) -> float | None:
        self._halt.set()
        self.join()
        if self.min_free_bytes is None:
            return None
        return self.min_free_bytes / GIB


def _parse_throughput(output: str, pattern: str) -> float:
    match = re.search(pattern, output)
    if match is None or not match.groups():
        tail = output[-500:].strip()
        raise PatternNotFound(
            f"pattern {pattern!r} captured nothing in workload output "
            f"(tail: {tail!r})"
        )
    return float(match.group(1))


def _run_native(workload: list[str], pattern: str) -> tuple[float, float | None]:
    sampler = _MemSampler()
    sampler.start()
    try:
        proc = subprocess.run(workload, stdout=subprocess.PIPE,
                              stderr=subprocess.STDOUT, text=True)
    finally:
        free = sampler.finish()
    if proc.returncode != 0:
        raise WorkloadFailed(
            f"native workload exited {proc.returncode}",
            exit_status=proc.returncode,
        )
    return _parse_throughput(proc.stdout, pattern), free


def measure_pair(workload: list[str], spec: "runtime.ContainerSpec",
                 repetitions: int = 3,
                 pattern: str = r"throughput:\s*([0-9.]+)",
                 benchmark_name: str | None = None) -> OverheadRecord:
    """Run the workload natively, then containerized; median both sides.

    The regex must capture the throughput figure in group 1.  All native
    repetitions run before any containerized one; interleaving would let
    cache and thermal state bleed between the sides of a pair.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    name = benchmark_name or Path(workload[0]).name

    native_tp, native_mem = [], []
    for _ in range(repetitions):
        tp, mem = _run_native(workload, pattern)
        native_tp.append(tp)
        if mem is not None:
            native_mem.append(mem)

    contained_tp, contained_mem = [], []
    contained = replace(spec, command=list(workload))
    for _ in range(repetitions):
        sampler = _MemSampler()
        sampler.start()
        with tempfile.TemporaryFile() as out:
            try:
                status = runtime.run(contained, stdout=out.fileno(),
                                     stderr=out.fileno())
            finally:
                mem = sampler.finish()
            out.seek(0)
            output = out.read().decode(errors="replace")
        if status != 0:
            raise WorkloadFailed(
                f"containerized workload exited {status}", exit_status=status
            )
        contained_tp.append(_parse_throughput(output, pattern))
        if mem is not None:
            contained_mem.append(mem)

    return OverheadRecord(
        benchmark_name=name,
        throughput_with=statistics.median(contained_tp),
        throughput_without=statistics.median(native_tp),
        free_mem_with_gb=(statistics.median(contained_mem)
                          if contained_mem else None),
        free_mem_without_gb=(statistics.median(native_mem)
                             if native_mem else None),
    )
