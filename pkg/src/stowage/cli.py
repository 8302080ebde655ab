"""Single entry point: image-to-archive, unpack, contained run, launch
plan rendering, and benchmark analysis as subcommands of one binary.

Exit codes: 0 success; 1 usage error; 2 operation error.  ``run`` is the
exception: it exits with the contained process's own code, or 125 when the
runtime itself failed, 126 when the command could not be executed, 127
when the command was not found.

Commands that start a contained process take the command after a ``--``
separator, e.g. ``stowage run ./rootfs -- echo hello``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import timedelta
from pathlib import Path

from . import archive as archive_mod
from . import bench as bench_mod
from . import image as image_mod
from . import launch as launch_mod
from . import runtime as runtime_mod
from .config import GlobalConfig, load_config
from .errors import ExecFailed, ExecNotFound, StowageError

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for
    operation failures, so usage errors exit 1 instead."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _split_tail(argv: list[str]) -> tuple[list[str], list[str] | None]:
    """Split at the first bare '--'; the tail is the contained command."""
    if "--" in argv:
        i = argv.index("--")
        return argv[:i], argv[i + 1:]
    return argv, None


def _parse_walltime(raw: str) -> timedelta:
    days = 0
    clock = raw
    if "-" in raw:
        day_part, _, clock = raw.partition("-")
        try:
            days = int(day_part)
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"bad walltime {raw!r}; use HH:MM:SS or D-HH:MM:SS") from None
    fields = clock.split(":")
    if len(fields) != 3:
        raise argparse.ArgumentTypeError(
            f"bad walltime {raw!r}; use HH:MM:SS or D-HH:MM:SS")
    try:
        hours, minutes, seconds = (int(f) for f in fields)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad walltime {raw!r}; use HH:MM:SS or D-HH:MM:SS") from None
    return timedelta(days=days, hours=hours, minutes=minutes, seconds=seconds)


def _parse_bind(raw: str) -> tuple[str, str]:
    src, sep, dst = raw.partition(":")
    if not sep or not src or not dst:
        raise argparse.ArgumentTypeError(
            f"bad bind {raw!r}; use SRC:DST (host path, container path)")
    return src, dst


def build_parser() -> _Parser:
    parser = _Parser(
        prog="stowage",
        description=(
            "Flatten container images into single rootfs archives, unpack "
            "them to node-local storage, run commands inside them without "
            "privileges or daemons, and analyze overhead and scaling."
        ),
    )
    parser.add_argument("--config", metavar="FILE",
                        help="key=value config file (see also STOWAGE_* env vars)")
    parser.add_argument("-v", "--verbose", action="count", default=None,
                        help="increase log detail (repeatable)")
    parser.add_argument("--site-bind-dirs", metavar="DIRS",
                        help="colon-separated host dirs to bind into every container")

    sub = parser.add_subparsers(dest="subcommand", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser(
        "flatten", help="squash an image into one rootfs archive",
        description="Parse an OCI image-layout directory or a docker-save "
                    "tar, squash its layers, and write <out.tar.gz>.")
    p.add_argument("image_input", help="OCI layout directory or docker-save tar")
    p.add_argument("out", help="output archive path (.tar.gz)")
    p.add_argument("--name", help="override the image name (top-level directory)")
    p.add_argument("--env-out", metavar="FILE",
                   help="also write the image config's KEY=VALUE env lines here")
    p.set_defaults(handler=_cmd_flatten)

    p = sub.add_parser(
        "pack", help="archive a rootfs directory (or image input)",
        description="Pack an unpacked rootfs directory into <out.tar.gz>. "
                    "An image input is accepted too and is flattened first.")
    p.add_argument("source", help="rootfs directory, OCI layout, or docker-save tar")
    p.add_argument("out", help="output archive path (.tar.gz)")
    p.add_argument("--name", help="top-level directory name (default: source basename)")
    p.set_defaults(handler=_cmd_pack)

    p = sub.add_parser(
        "unpack", help="extract a rootfs archive",
        description="Extract an archive produced by flatten/pack into DEST, "
                    "refusing to clobber an existing tree unless --overwrite.")
    p.add_argument("archive", help="rootfs archive (.tar.gz)")
    p.add_argument("dest", help="existing destination directory (disk or tmpfs)")
    p.add_argument("--overwrite", action="store_true",
                   help="replace dest/<name> if it already exists")
    p.set_defaults(handler=_cmd_unpack)

    p = sub.add_parser(
        "run", help="run a command inside an unpacked rootfs",
        description="Enter unprivileged user+mount namespaces with the "
                    "invoker's own UID/GID and exec the command inside "
                    "ROOTFS. The command goes after '--'.",
        epilog="example: stowage run ./rootfs -- echo 'container hello world!'")
    p.add_argument("-w", "--writable", action="store_true",
                   help="leave the image tree writable (default: read-only)")
    p.add_argument("--bind", action="append", default=[], type=_parse_bind,
                   metavar="SRC:DST", help="bind host SRC at DST inside (repeatable)")
    p.add_argument("--cd", metavar="DIR", help="working directory inside the container")
    p.add_argument("--env-policy", choices=runtime_mod.ENV_POLICIES,
                   help="environment to give the command (default from config)")
    p.add_argument("--env-file", metavar="FILE",
                   help="KEY=VALUE lines to use as the image environment")
    p.add_argument("rootfs", help="unpacked rootfs directory")
    p.set_defaults(handler=_cmd_run, takes_tail=True)

    p = sub.add_parser(
        "launch", help="render launch command lines and batch scripts")
    launch_sub = p.add_subparsers(dest="launch_command", metavar="ACTION")
    launch_sub.required = True
    lp = launch_sub.add_parser(
        "plan", help="render one launch plan",
        description="Render the hybrid placement plan (one or more MPI "
                    "ranks per node, threads filling the hardware threads) "
                    "as a command line or a Slurm batch script. The "
                    "contained command goes after '--'.",
        epilog="example: stowage launch plan --nodes 4 --cores 48 --smt 2 "
               "--container ./rootfs --emit slurm -- train --epochs 10")
    lp.add_argument("--nodes", type=int, required=True, help="node count")
    lp.add_argument("--ranks-per-node", type=int, default=1,
                    help="MPI ranks per node (default 1)")
    lp.add_argument("--cores", type=int, required=True,
                    help="physical cores per node")
    lp.add_argument("--smt", type=int, default=1,
                    help="hardware threads per core (default 1)")
    lp.add_argument("--container", required=True, help="rootfs path on the nodes")
    lp.add_argument("--emit", choices=("cmdline", "slurm"), default="cmdline",
                    help="output flavor (default cmdline)")
    lp.add_argument("--job-name", default="stowage-job", help="scheduler job name")
    lp.add_argument("--walltime", type=_parse_walltime, default=timedelta(hours=1),
                    metavar="HH:MM:SS", help="walltime (HH:MM:SS or D-HH:MM:SS)")
    lp.add_argument("--mpirun", default="mpirun", help="MPI launcher binary name")
    lp.add_argument("--mpirun-arg", action="append", default=[], metavar="ARG",
                    help="extra argument for the MPI launcher (repeatable)")
    lp.add_argument("--output", metavar="FILE", help="write here instead of stdout")
    lp.set_defaults(handler=_cmd_launch_plan, takes_tail=True)

    p = sub.add_parser(
        "bench", help="measure and analyze containerization overhead")
    bench_sub = p.add_subparsers(dest="bench_command", metavar="ACTION")
    bench_sub.required = True

    bp = bench_sub.add_parser(
        "measure", help="run one workload natively and containerized",
        description="Run the workload (after '--') natively and inside "
                    "ROOTFS, parse throughput from its output, sample free "
                    "memory, and print one measurement record.",
        epilog="example: stowage bench measure --rootfs ./rootfs "
               "--pattern 'rate: ([0-9.]+)' -- mybench --size 100")
    bp.add_argument("--rootfs", required=True, help="unpacked rootfs directory")
    bp.add_argument("--pattern", default=r"throughput:\s*([0-9.]+)",
                    help="regex whose group 1 captures the throughput figure")
    bp.add_argument("--reps", type=int, default=3,
                    help="repetitions per side, median reported (default 3)")
    bp.add_argument("--name", help="benchmark name (default: workload basename)")
    bp.add_argument("-w", "--writable", action="store_true",
                    help="leave the image tree writable during the run")
    bp.add_argument("--bind", action="append", default=[], type=_parse_bind,
                    metavar="SRC:DST", help="bind host SRC at DST inside (repeatable)")
    bp.add_argument("--env-policy", choices=runtime_mod.ENV_POLICIES,
                    help="environment for the contained side")
    bp.add_argument("--output", metavar="FILE",
                    help="write the record here instead of stdout")
    bp.set_defaults(handler=_cmd_bench_measure, takes_tail=True)

    bp = bench_sub.add_parser(
        "overhead", help="turn measurement records into an overhead report",
        description="Read records (CSV header: benchmark,tp_with,tp_without,"
                    "mem_with,mem_without) and report relative throughput "
                    "deltas and memory deltas, flagging any throughput "
                    "delta beyond the threshold.")
    bp.add_argument("records", help="measurement CSV")
    bp.add_argument("--threshold", type=float, default=bench_mod.DEFAULT_THRESHOLD,
                    help="flagging threshold for |throughput delta| (default 0.02)")
    bp.add_argument("--format", choices=("csv", "json"), default="csv",
                    help="report format (default csv)")
    bp.add_argument("--output", metavar="FILE", help="write here instead of stdout")
    bp.set_defaults(handler=_cmd_bench_overhead)

    p = sub.add_parser(
        "scale-report", help="speedup and efficiency from epoch times",
        description="Read a series (CSV header: nodes,epoch_time_s) and "
                    "report speedup, parallel efficiency, and the linear "
                    "reference per node count.")
    p.add_argument("series", help="measurement CSV")
    p.add_argument("--baseline", type=int,
                   help="baseline node count (default: smallest in the series)")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="report format (default csv)")
    p.add_argument("--plot-data", metavar="FILE",
                   help="also write nodes,measured_speedup,linear_speedup here")
    p.add_argument("--output", metavar="FILE", help="write here instead of stdout")
    p.set_defaults(handler=_cmd_scale_report)

    p = sub.add_parser(
        "probe", help="report this host's container capabilities",
        description="Check unprivileged user-namespace support and related "
                    "host facts; never changes anything.")
    p.set_defaults(handler=_cmd_probe)

    return parser


# ---------------------------------------------------------------------------
# handlers (each returns a process exit code)

def _cmd_flatten(args, config: GlobalConfig, tail) -> int:
    manifest, rootfs = image_mod.flatten_image(args.image_input)
    name = args.name or manifest.image_name
    packed = archive_mod.pack(rootfs, name, args.out)
    if args.env_out:
        Path(args.env_out).write_text(
            "".join(line + "\n" for line in manifest.config_env))
    print(f"{packed.path}: {len(rootfs.tree)} entries, "
          f"{rootfs.total_size_bytes} bytes of file content, "
          f"top-level directory {packed.top_level_name!r}")
    return 0


def _cmd_pack(args, config: GlobalConfig, tail) -> int:
    source = Path(args.source)
    if source.is_dir() and not (source / "index.json").is_file():
        rootfs = image_mod.rootfs_from_dir(source)
        name = args.name or source.name
    else:
        manifest, rootfs = image_mod.flatten_image(source)
        name = args.name or manifest.image_name
    packed = archive_mod.pack(rootfs, name, args.out)
    print(f"{packed.path}: {len(rootfs.tree)} entries, "
          f"top-level directory {packed.top_level_name!r}")
    return 0


def _cmd_unpack(args, config: GlobalConfig, tail) -> int:
    target = archive_mod.unpack(args.archive, args.dest,
                                overwrite=args.overwrite)
    print(target)
    return 0


def _read_env_file(path: str) -> list[str]:
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def _cmd_run(args, config: GlobalConfig, tail) -> int:
    if not tail:
        raise _Usage("run needs a command after '--'")
    spec = runtime_mod.ContainerSpec(
        rootfs=Path(args.rootfs),
        command=tail,
        binds=args.bind,
        env_policy=args.env_policy or config.default_env_policy,
        workdir=args.cd,
        writable=args.writable,
        image_env=_read_env_file(args.env_file) if args.env_file else [],
        site_binds=config.site_bind_dirs,
    )
    try:
        runtime_mod.exec_spec(spec)
    except ExecNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 127
    except ExecFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 126
    except StowageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 125
    raise AssertionError("exec_spec returned")  # pragma: no cover


def _cmd_launch_plan(args, config: GlobalConfig, tail) -> int:
    if not tail:
        raise _Usage("launch plan needs a command after '--'")
    plan = launch_mod.LaunchPlan(
        nodes=args.nodes,
        ranks_per_node=args.ranks_per_node,
        physical_cores_per_node=args.cores,
        threads_per_core=args.smt,
        container=args.container,
        command=tail,
        job_name=args.job_name,
        walltime=args.walltime,
        mpirun=args.mpirun,
        mpirun_args=args.mpirun_arg,
    )
    if args.emit == "slurm":
        text = launch_mod.render_slurm(plan)
    elif plan.nodes == 1 and plan.ranks_per_node == 1:
        text = launch_mod.render_single_node(plan) + "\n"
    else:
        text = launch_mod.render_mpi(plan) + "\n"
    _emit(text, args.output)
    return 0


def _cmd_bench_measure(args, config: GlobalConfig, tail) -> int:
    if not tail:
        raise _Usage("bench measure needs a workload command after '--'")
    spec = runtime_mod.ContainerSpec(
        rootfs=Path(args.rootfs),
        command=tail,
        binds=args.bind,
        env_policy=args.env_policy or config.default_env_policy,
        writable=args.writable,
        site_binds=config.site_bind_dirs,
    )
    record = bench_mod.measure_pair(tail, spec, repetitions=args.reps,
                                    pattern=args.pattern,
                                    benchmark_name=args.name)
    row = ",".join([
        record.benchmark_name,
        "" if record.throughput_with is None else repr(record.throughput_with),
        "" if record.throughput_without is None else repr(record.throughput_without),
        "" if record.free_mem_with_gb is None else repr(record.free_mem_with_gb),
        "" if record.free_mem_without_gb is None else repr(record.free_mem_without_gb),
    ])
    _emit(f"benchmark,tp_with,tp_without,mem_with,mem_without\n{row}\n",
          args.output)
    return 0


def _cmd_bench_overhead(args, config: GlobalConfig, tail) -> int:
    records = bench_mod.read_overhead_csv(args.records)
    report = bench_mod.overhead_report(records, threshold=args.threshold)
    if args.format == "json":
        text = bench_mod.overhead_report_to_json(report) + "\n"
    else:
        text = bench_mod.overhead_report_to_csv(report)
    _emit(text, args.output)
    return 0


def _cmd_scale_report(args, config: GlobalConfig, tail) -> int:
    series = bench_mod.read_scaling_csv(args.series)
    report = bench_mod.scaling_report(series, baseline_nodes=args.baseline)
    if args.format == "json":
        text = bench_mod.scaling_report_to_json(report) + "\n"
    else:
        text = bench_mod.scaling_report_to_csv(report)
    _emit(text, args.output)
    if args.plot_data:
        Path(args.plot_data).write_text(bench_mod.plot_data(report))
    return 0


def _cmd_probe(args, config: GlobalConfig, tail) -> int:
    print(runtime_mod.probe_support().render())
    return 0


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


class _Usage(Exception):
    """Usage problem detected after argparse (e.g. missing '--' tail)."""


# ---------------------------------------------------------------------------
# dispatch

def dispatch(argv: list[str]) -> int:
    head, tail = _split_tail(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(head)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 0

    if tail is not None and not getattr(args, "takes_tail", False):
        print(f"stowage {args.subcommand}: error: this command takes no "
              f"'--' tail", file=sys.stderr)
        return 1

    try:
        config = load_config(
            flag_bind_dirs=(args.site_bind_dirs.split(":")
                            if args.site_bind_dirs else None),
            flag_env_policy=getattr(args, "env_policy", None),
            flag_verbosity=args.verbose,
            config_file=args.config,
        )
    except StowageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    level = {0: logging.WARNING, 1: logging.INFO}.get(config.verbosity,
                                                      logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args, config, tail)
    except _Usage as exc:
        print(f"stowage {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1
    except StowageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
