"""Daemon-free container deployment for air-gapped HPC clusters.

Flatten a container image into a single rootfs archive, unpack it on a
node, run commands inside it via unprivileged user namespaces (wrappable
by an MPI launcher), and analyze the overhead and scaling numbers.
"""

from .archive import RootfsArchive, load, pack, unpack
from .bench import (
    OverheadRecord,
    OverheadReport,
    OverheadRow,
    ScalingRecord,
    ScalingReport,
    ScalingRow,
    measure_pair,
    overhead_report,
    scaling_report,
)
from .config import GlobalConfig, load_config
from .errors import StowageError
from .image import (
    EntryKind,
    FlattenedRootfs,
    ImageManifest,
    LayerEntry,
    LayerRef,
    apply_layer,
    flatten,
    flatten_image,
    parse_image,
    rootfs_from_dir,
)
from .launch import (
    LaunchPlan,
    render_mpi,
    render_single_node,
    render_slurm,
)
from .runtime import (
    ContainerSpec,
    IdentityMap,
    SupportReport,
    exec_spec,
    probe_support,
    run,
)

__version__ = "0.1.0"

__all__ = [
    "ContainerSpec",
    "EntryKind",
    "FlattenedRootfs",
    "GlobalConfig",
    "IdentityMap",
    "ImageManifest",
    "LaunchPlan",
    "LayerEntry",
    "LayerRef",
    "OverheadRecord",
    "OverheadReport",
    "OverheadRow",
    "RootfsArchive",
    "ScalingRecord",
    "ScalingReport",
    "ScalingRow",
    "StowageError",
    "SupportReport",
    "apply_layer",
    "exec_spec",
    "flatten",
    "flatten_image",
    "load",
    "load_config",
    "measure_pair",
    "overhead_report",
    "pack",
    "parse_image",
    "probe_support",
    "render_mpi",
    "render_single_node",
    "render_slurm",
    "rootfs_from_dir",
    "run",
    "scaling_report",
    "unpack",
]
