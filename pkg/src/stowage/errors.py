"""Exception taxonomy shared by all stowage modules.

Every error stowage raises deliberately derives from StowageError so the CLI
can map "our" failures to exit code 2 (or 125 for runtime launch failures)
while genuine bugs still surface as tracebacks.
"""


class StowageError(Exception):
    """Base class for all anticipated stowage failures."""


# -- image parsing / flattening ---------------------------------------------

class UnknownFormat(StowageError):
    """Input is neither an OCI image-layout directory nor a docker-save tar."""


class DigestMismatch(StowageError):
    """A blob's content hash does not match its declared digest."""


class MissingBlob(StowageError):
    """A manifest references a blob that is not present in the store."""


class EmptyImage(StowageError):
    """The image declares zero layers."""


class PathEscape(StowageError):
    """An entry path would resolve outside the rootfs / destination root."""


class ConflictingKind(StowageError):
    """An entry cannot be inserted because of an incompatible existing entry."""


class HardlinkTargetMissing(StowageError):
    """A hardlink survives flattening but its target was deleted."""


# -- archive -----------------------------------------------------------------

class EmptyRootfs(StowageError):
    """Refusing to pack a rootfs with no entries."""


class DestCollision(StowageError):
    """Unpack destination already holds a directory with the image's name."""


class IoFailure(StowageError):
    """An underlying filesystem operation failed (disk/tmpfs full, perms...)."""


# -- runtime -----------------------------------------------------------------

class NoUserNamespaces(StowageError):
    """The kernel refuses unprivileged user namespaces; message says why."""


class RootfsMissing(StowageError):
    """The container rootfs path does not exist or is not a directory."""


class BindSourceMissing(StowageError):
    """A requested bind-mount source does not exist on the host."""


class ExecFailed(StowageError):
    """The command could not be executed inside the container."""

    def __init__(self, message: str, errno: int = 0):
        super().__init__(message)
        self.errno = errno


class ExecNotFound(ExecFailed):
    """The command was not found inside the container."""


# -- launcher ----------------------------------------------------------------

class PlanMismatch(StowageError):
    """A launch plan is internally inconsistent or wrong for the renderer."""


# -- bench -------------------------------------------------------------------

class MissingBaseline(StowageError):
    """The scaling series does not contain the requested baseline node count."""


class DuplicateNodeCount(StowageError):
    """The scaling series lists the same node count twice."""


class NoMeasurements(StowageError):
    """No record carries a usable measurement pair."""


class WorkloadFailed(StowageError):
    """A measured workload exited non-zero."""

    def __init__(self, message: str, exit_status: int = -1):
        super().__init__(message)
        self.exit_status = exit_status


class PatternNotFound(StowageError):
    """The throughput pattern matched nothing in the workload's output."""
