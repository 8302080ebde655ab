"""Execute a command inside an unpacked rootfs without any privilege.

The mechanism is a user namespace plus a mount namespace, both created by
the invoking (unprivileged) user.  The UID/GID map is always the identity
map of the invoker, so nothing inside the container can act as anyone
else.  There is no daemon and no setuid helper: the contained process is a
direct child of the caller, which keeps exit codes, signals, and MPI
launcher process management working untouched.

Mount plan, in order: make every inherited mount private, self-bind the
rootfs so it becomes a mount point, create missing mountpoint directories
while the tree is still writable, remount the rootfs read-only unless
writability was requested, bind the default and requested host directories
in, disable privilege gain for the subtree, then pivot into the rootfs.
"""

from __future__ import annotations

import ctypes
import errno as errno_mod
import logging
import os
import platform
import signal
from dataclasses import dataclass, field
from fcntl import ioctl
from pathlib import Path

from .errors import (
    BindSourceMissing,
    ExecFailed,
    ExecNotFound,
    NoUserNamespaces,
    PathEscape,
    RootfsMissing,
    StowageError,
)
from .image import normalize_entry_path

log = logging.getLogger(__name__)

CLONE_NEWNS = 0x00020000
CLONE_NEWUSER = 0x10000000

MS_RDONLY = 1
MS_REMOUNT = 32
MS_BIND = 4096
MS_REC = 16384
MS_PRIVATE = 1 << 18
MNT_DETACH = 2

PR_SET_NO_NEW_PRIVS = 38

# pivot_root has no libc wrapper everywhere; call the syscall directly.
_PIVOT_ROOT_NR = {"x86_64": 155, "aarch64": 41}.get(platform.machine())

NS_GET_PARENT = 0xB702

DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"

ENV_POLICIES = ("inherit-host", "image-config", "merged")

_libc = ctypes.CDLL("libc.so.6", use_errno=True)


class _OsError(OSError):
    """OSError carrying the failing stage, for error-pipe reporting."""

    def __init__(self, errno_value: int, stage: str, detail: str):
        super().__init__(errno_value, detail)
        self.stage = stage


def _fail(stage: str, detail: str) -> None:
    err = ctypes.get_errno()
    raise _OsError(err, stage, f"{detail}: {os.strerror(err)}")


def _unshare(flags: int) -> None:
    if _libc.unshare(flags) != 0:
        _fail("unshare", f"unshare(0x{flags:x})")


def _mount(source: str, target: str, flags: int) -> None:
    rc = _libc.mount(source.encode(), target.encode(), None, flags, None)
    if rc != 0:
        _fail("mount", f"mount {source!r} -> {target!r} flags=0x{flags:x}")


def _pivot_root_or_chroot(rootfs: str) -> None:
    os.chdir(rootfs)
    if _PIVOT_ROOT_NR is not None:
        if _libc.syscall(_PIVOT_ROOT_NR, b".", b".") == 0:
            if _libc.umount2(b".", MNT_DETACH) != 0:
                _fail("mount", "detach of the old root")
            os.chdir("/")
            return
        log.debug("pivot_root failed (%s), falling back to chroot",
                  os.strerror(ctypes.get_errno()))
    if _libc.chroot(b".") != 0:
        _fail("mount", "chroot into rootfs")
    os.chdir("/")


def _no_new_privs() -> None:
    if _libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        _fail("prctl", "PR_SET_NO_NEW_PRIVS")


def _write_proc(path: str, data: str, stage: str) -> None:
    try:
        fd = os.open(path, os.O_WRONLY)
        try:
            os.write(fd, data.encode())
        finally:
            os.close(fd)
    except OSError as exc:
        raise _OsError(exc.errno or 0, stage, f"writing {path}") from exc


@dataclass(frozen=True)
class IdentityMap:
    """The only UID/GID mapping this runtime will ever install."""

    host_uid: int
    host_gid: int

    @property
    def container_uid(self) -> int:
        return self.host_uid

    @property
    def container_gid(self) -> int:
        return self.host_gid

    @classmethod
    def current(cls) -> "IdentityMap":
        return cls(host_uid=os.getuid(), host_gid=os.getgid())

    def install(self) -> None:
        _write_proc("/proc/self/uid_map",
                    f"{self.host_uid} {self.host_uid} 1\n", "map")
        # Unprivileged gid_map writes require setgroups to be denied first.
        _write_proc("/proc/self/setgroups", "deny\n", "map")
        _write_proc("/proc/self/gid_map",
                    f"{self.host_gid} {self.host_gid} 1\n", "map")


@dataclass
class ContainerSpec:
    """Everything needed to launch one process inside an unpacked rootfs."""

    rootfs: Path
    command: list[str]
    binds: list[tuple[str, str]] = field(default_factory=list)
    env_policy: str = "inherit-host"
    workdir: str | None = None
    writable: bool = False
    image_env: list[str] = field(default_factory=list)
    site_binds: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rootfs = Path(self.rootfs)
        if not self.command:
            raise ValueError("container command must be non-empty")
        if self.env_policy not in ENV_POLICIES:
            raise ValueError(
                f"unknown env policy {self.env_policy!r}; "
                f"choose one of {', '.join(ENV_POLICIES)}"
            )


def validate(spec: ContainerSpec) -> None:
    if not spec.rootfs.is_dir():
        raise RootfsMissing(f"rootfs is not a directory: {spec.rootfs}")
    for src, dst in spec.binds:
        if not os.path.exists(src):
            raise BindSourceMissing(f"bind source does not exist: {src}")
        if not normalize_entry_path(dst):
            raise PathEscape(f"bind destination may not be the container root: {dst!r}")
    for src in spec.site_binds:
        if not os.path.exists(src):
            raise BindSourceMissing(f"site bind directory does not exist: {src}")


def _collect_binds(spec: ContainerSpec) -> list[tuple[str, str]]:
    """Return (host_source, container-relative dest) pairs, defaults first.

    Default binds that do not exist on the host are skipped; explicitly
    requested ones were already checked by validate().
    """
    pairs: list[tuple[str, str]] = []
    for host in ("/dev", "/proc", "/sys"):
        if os.path.isdir(host):
            pairs.append((host, host.lstrip("/")))
    home = os.environ.get("HOME")
    if home and os.path.isdir(home):
        pairs.append((home, home.lstrip("/")))
    for src in spec.site_binds:
        pairs.append((src, src.lstrip("/")))
    for src, dst in spec.binds:
        rel = normalize_entry_path(dst)
        if not rel:
            raise PathEscape(f"bind destination may not be the container root: {dst!r}")
        pairs.append((src, rel))
    return pairs


def _build_env(spec: ContainerSpec) -> dict[str, str]:
    host = dict(os.environ)
    image = {}
    for item in spec.image_env:
        key, sep, value = item.partition("=")
        if sep:
            image[key] = value
    if spec.env_policy == "inherit-host":
        env = host
    elif spec.env_policy == "image-config":
        env = image
        if "HOME" in host:
            env.setdefault("HOME", host["HOME"])
    else:
        env = host
        env.update(image)
    env.setdefault("PATH", DEFAULT_PATH)
    return env


def enter(spec: ContainerSpec) -> dict[str, str]:
    """Move the calling process into the container; return the final env.

    After this returns, the process root is the rootfs and the working
    directory is spec.workdir (default /).  The caller's next step is
    exec.  Raises _OsError subtypes on kernel refusals; callers translate.
    """
    rootfs = str(spec.rootfs.resolve())
    binds = _collect_binds(spec)
    env = _build_env(spec)
    identity = IdentityMap.current()

    _unshare(CLONE_NEWUSER | CLONE_NEWNS)
    identity.install()

    # Stop mount events from leaking back to the host namespace.
    _mount("none", "/", MS_REC | MS_PRIVATE)
    # The rootfs must be a mount point before it can be remounted read-only.
    _mount(rootfs, rootfs, MS_BIND)

    for src, rel in binds:
        point = os.path.join(rootfs, rel)
        try:
            if os.path.isdir(src):
                os.makedirs(point, exist_ok=True)
            else:
                os.makedirs(os.path.dirname(point), exist_ok=True)
                if not os.path.exists(point):
                    open(point, "wb").close()
        except OSError as exc:
            raise _OsError(exc.errno or 0, "mount",
                           f"cannot create mountpoint {point}") from exc

    if not spec.writable:
        _mount("none", rootfs, MS_REMOUNT | MS_BIND | MS_RDONLY)

    for src, rel in binds:
        _mount(src, os.path.join(rootfs, rel), MS_BIND | MS_REC)

    _no_new_privs()
    _pivot_root_or_chroot(rootfs)

    workdir = spec.workdir or "/"
    try:
        os.chdir(workdir)
    except OSError as exc:
        raise _OsError(exc.errno or 0, "chdir",
                       f"cannot enter workdir {workdir}") from exc
    return env


def _translate(exc: _OsError) -> StowageError:
    if exc.stage == "unshare":
        return NoUserNamespaces(
            "the kernel refused to create an unprivileged user namespace "
            f"({exc.strerror}); check /proc/sys/user/max_user_namespaces and, "
            "on Debian-family kernels, sysctl kernel.unprivileged_userns_clone"
        )
    if exc.stage == "exec":
        message = f"cannot execute {exc.filename or 'command'}: {exc.strerror}"
        if exc.errno == errno_mod.ENOENT:
            return ExecNotFound(message, errno=exc.errno)
        return ExecFailed(message, errno=exc.errno or 0)
    return StowageError(f"container setup failed at {exc.stage}: {exc.strerror or exc}")


def exec_spec(spec: ContainerSpec) -> None:
    """Enter the container and replace this process with the command.

    Never returns on success; the contained command inherits this PID, so
    signals and exit status pass through with no relay in between.
    """
    validate(spec)
    try:
        env = enter(spec)
    except _OsError as exc:
        raise _translate(exc) from exc
    argv = list(spec.command)
    try:
        os.execvpe(argv[0], argv, env)
    except OSError as exc:
        wrapped = _OsError(exc.errno or 0, "exec", exc.strerror or str(exc))
        wrapped.filename = argv[0]
        raise _translate(wrapped) from exc


def run(spec: ContainerSpec, stdout: int | None = None,
        stderr: int | None = None) -> int:
    """Fork, contain the child, and return the command's exit status.

    SIGTERM and SIGINT arriving at the caller are forwarded to the child.
    A child killed by signal N is reported as 128 + N.  Setup failures in
    the child are raised here as the matching StowageError.
    """
    validate(spec)
    read_fd, write_fd = os.pipe()
    os.set_inheritable(write_fd, True)

    pid = os.fork()
    if pid == 0:
        os.close(read_fd)
        code = 125
        try:
            if stdout is not None:
                os.dup2(stdout, 1)
            if stderr is not None:
                os.dup2(stderr, 2)
            env = enter(spec)
            argv = list(spec.command)
            try:
                os.execvpe(argv[0], argv, env)
            except OSError as exc:
                code = 127 if exc.errno == errno_mod.ENOENT else 126
                wrapped = _OsError(exc.errno or 0, "exec",
                                   exc.strerror or str(exc))
                wrapped.filename = argv[0]
                raise wrapped from exc
        except _OsError as exc:
            _report_child_error(write_fd, exc.stage, exc.errno or 0,
                                exc.strerror or "", str(exc.filename or ""))
        except BaseException as exc:  # noqa: BLE001 - child must never unwind
            _report_child_error(write_fd, "internal", 0, repr(exc), "")
        os._exit(code)

    os.close(write_fd)
    previous = {}
    for signum in (signal.SIGTERM, signal.SIGINT):
        previous[signum] = signal.signal(
            signum, lambda s, _frame: os.kill(pid, s))
    try:
        _, status = os.waitpid(pid, 0)
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)

    report = b""
    while True:
        chunk = os.read(read_fd, 4096)
        if not chunk:
            break
        report += chunk
    os.close(read_fd)

    if report:
        stage, err, detail, filename = _parse_child_error(report)
        exc = _OsError(err, stage, detail)
        exc.filename = filename or None
        raise _translate(exc)

    if os.WIFSIGNALED(status):
        return 128 + os.WTERMSIG(status)
    return os.WEXITSTATUS(status)


def _report_child_error(fd: int, stage: str, err: int, detail: str,
                        filename: str) -> None:
    payload = "\x00".join((stage, str(err), detail, filename)).encode()
    try:
        os.write(fd, payload)
    except OSError:
        pass


def _parse_child_error(report: bytes) -> tuple[str, int, str, str]:
    parts = report.decode(errors="replace").split("\x00")
    parts += [""] * (4 - len(parts))
    try:
        err = int(parts[1])
    except ValueError:
        err = 0
    return parts[0], err, parts[2], parts[3]


# ---------------------------------------------------------------------------
# capability probing

@dataclass
class SupportReport:
    """What this host can and cannot do, with the reason when it cannot."""

    userns: bool
    detail: str
    max_user_namespaces: int | None
    userns_sysctl: bool | None     # Debian-family toggle; None when absent
    overlayfs: bool
    nesting_depth: int

    def render(self) -> str:
        lines = [
            "user namespaces:     "
            + ("available" if self.userns else f"UNAVAILABLE ({self.detail})"),
            "max user namespaces: "
            + ("unknown" if self.max_user_namespaces is None
               else str(self.max_user_namespaces)),
        ]
        if self.userns_sysctl is not None:
            lines.append(
                "kernel.unprivileged_userns_clone: "
                + ("1" if self.userns_sysctl else "0")
            )
        lines.append("overlayfs:           "
                     + ("present" if self.overlayfs else "absent"))
        lines.append(f"namespace nesting:   depth {self.nesting_depth}")
        return "\n".join(lines)


def _read_int_sysctl(path: str) -> int | None:
    try:
        with open(path) as handle:
            return int(handle.read().strip())
    except (OSError, ValueError):
        return None


def _probe_unshare() -> tuple[bool, str]:
    """Try the real thing in a throwaway child; nothing persists."""
    read_fd, write_fd = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(read_fd)
        try:
            _unshare(CLONE_NEWUSER)
            os.write(write_fd, b"0")
        except _OsError as exc:
            os.write(write_fd, str(exc.errno or 1).encode())
        os._exit(0)
    os.close(write_fd)
    data = os.read(read_fd, 32)
    os.close(read_fd)
    os.waitpid(pid, 0)
    if data == b"0":
        return True, "unshare(CLONE_NEWUSER) succeeded"
    err = int(data or b"1")
    return False, f"unshare(CLONE_NEWUSER) failed: {os.strerror(err)}"


def _nesting_depth() -> int:
    """How many user namespaces deep this process runs.

    The NS_GET_PARENT climb only works for a caller privileged over the
    ancestor namespaces; from inside a constructed namespace it returns
    EPERM on the first step.  In that case fall back to the uid_map: only
    the initial namespace carries the full-range identity map, so anything
    else is at least one level deep (deeper nesting is indistinguishable).
    """
    depth = 0
    try:
        fd = os.open("/proc/self/ns/user", os.O_RDONLY)
    except OSError:
        return 0
    try:
        while depth < 32:
            try:
                parent = ioctl(fd, NS_GET_PARENT)
            except OSError:
                break
            os.close(fd)
            fd = parent
            depth += 1
    finally:
        os.close(fd)
    if depth:
        return depth
    try:
        with open("/proc/self/uid_map") as handle:
            fields = handle.read().split()
    except OSError:
        return 0
    if fields == ["0", "0", "4294967295"]:
        return 0
    return 1


def probe_support() -> SupportReport:
    """Inspect the host's container capabilities without changing it."""
    userns, detail = _probe_unshare()
    max_ns = _read_int_sysctl("/proc/sys/user/max_user_namespaces")
    sysctl_raw = _read_int_sysctl("/proc/sys/kernel/unprivileged_userns_clone")
    if not userns:
        if sysctl_raw == 0:
            detail += "; sysctl kernel.unprivileged_userns_clone is 0"
        elif max_ns == 0:
            detail += "; sysctl user.max_user_namespaces is 0"
    overlay = False
    try:
        with open("/proc/filesystems") as handle:
            overlay = any(line.split()[-1] == "overlay" for line in handle if line.strip())
    except OSError:
        pass
    return SupportReport(
        userns=userns,
        detail=detail,
        max_user_namespaces=max_ns,
        userns_sysctl=None if sysctl_raw is None else bool(sysctl_raw),
        overlayfs=overlay,
        nesting_depth=_nesting_depth(),
    )
