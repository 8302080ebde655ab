"""Render launch invocations for the one-rank-per-node hybrid scheme.

A LaunchPlan pins the placement arithmetic: total ranks are nodes times
ranks per node, and each rank gets an equal, exact share of the node's
hardware threads.  Renderers turn one plan into a single-node command, an
MPI command line, or a Slurm batch script.  Everything here is a pure
function of the plan; nothing talks to a scheduler.

The MPI launcher always wraps the container runtime, never the reverse:
``mpirun -n <ranks> <runtime> run <rootfs> -- <cmd>``.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from datetime import timedelta

from .errors import PlanMismatch

DEFAULT_THREAD_ENV_VAR = "OMP_NUM_THREADS"
DEFAULT_RUNTIME = "stowage"
DEFAULT_MODULE = "stowage"


@dataclass
class LaunchPlan:
    nodes: int
    ranks_per_node: int
    physical_cores_per_node: int
    threads_per_core: int
    container: str
    command: list[str]
    job_name: str = "stowage-job"
    walltime: timedelta = field(default_factory=lambda: timedelta(hours=1))
    mpirun: str = "mpirun"
    mpirun_args: list[str] = field(default_factory=list)
    runtime: str = DEFAULT_RUNTIME
    thread_env_var: str = DEFAULT_THREAD_ENV_VAR
    module_name: str = DEFAULT_MODULE

    def validate(self) -> None:
        for name in ("nodes", "ranks_per_node", "physical_cores_per_node",
                     "threads_per_core"):
            if getattr(self, name) < 1:
                raise PlanMismatch(f"{name} must be a positive count")
        if not self.command:
            raise PlanMismatch("plan has no command to launch")
        hw_threads = self.physical_cores_per_node * self.threads_per_core
        if hw_threads % self.ranks_per_node != 0:
            raise PlanMismatch(
                f"{hw_threads} hardware threads per node do not divide evenly "
                f"among {self.ranks_per_node} ranks"
            )

    @property
    def total_ranks(self) -> int:
        return self.nodes * self.ranks_per_node

    @property
    def threads_per_rank(self) -> int:
        self.validate()
        return (self.physical_cores_per_node * self.threads_per_core
                // self.ranks_per_node)


def _runtime_invocation(plan: LaunchPlan) -> str:
    parts = [plan.runtime, "run", shlex.quote(plan.container), "--"]
    parts += [shlex.quote(arg) for arg in plan.command]
    return " ".join(parts)


def render_single_node(plan: LaunchPlan) -> str:
    """One node, no MPI: thread count exported inline before the runtime."""
    plan.validate()
    if plan.nodes != 1:
        raise PlanMismatch(
            f"single-node rendering asked for a {plan.nodes}-node plan"
        )
    return (f"{plan.thread_env_var}={plan.threads_per_rank} "
            + _runtime_invocation(plan))


def render_mpi(plan: LaunchPlan) -> str:
    """The multi-node command line: launcher outside, runtime inside."""
    plan.validate()
    parts = [plan.mpirun, "-n", str(plan.total_ranks)]
    parts += plan.mpirun_args
    return " ".join(parts) + " " + _runtime_invocation(plan)


def format_walltime(walltime: timedelta) -> str:
    total = int(walltime.total_seconds())
    days, rest = divmod(total, 86400)
    hours, rest = divmod(rest, 3600)
    minutes, seconds = divmod(rest, 60)
    if days:
        return f"{days}-{hours:02d}:{minutes:02d}:{seconds:02d}"
    return f"{hours:02d}:{minutes:02d}:{seconds:02d}"


def render_slurm(plan: LaunchPlan) -> str:
    """A complete batch script; identical plans yield identical bytes.

    A one-node single-rank plan launches the runtime directly (the export
    line carries what render_single_node would prepend); anything larger
    goes through the MPI launcher.
    """
    plan.validate()
    if plan.nodes == 1 and plan.ranks_per_node == 1:
        launch_line = _runtime_invocation(plan)
    else:
        launch_line = render_mpi(plan)
    lines = [
        "#!/bin/bash",
        f"#SBATCH --job-name={plan.job_name}",
        f"#SBATCH --nodes={plan.nodes}",
        f"#SBATCH --ntasks-per-node={plan.ranks_per_node}",
        f"#SBATCH --cpus-per-task={plan.threads_per_rank}",
        f"#SBATCH --time={format_walltime(plan.walltime)}",
        "",
        f"module load {plan.module_name}",
        f"export {plan.thread_env_var}={plan.threads_per_rank}",
        "",
        launch_line,
        "",
    ]
    return "\n".join(lines)
