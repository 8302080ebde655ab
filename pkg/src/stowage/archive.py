"""Serialize a flattened rootfs to one tar.gz and unpack it safely.

The archive is a POSIX pax tar inside gzip with exactly one top-level
directory (the image name).  Packing is deterministic: entries are sorted,
ownership is dropped, and the gzip header carries no timestamp, so packing
the same tree twice yields byte-identical files.

Unpacking never trusts the archive.  Every member is validated against the
destination before anything is written: absolute paths, ``..`` components,
members routed through a symlink created earlier in the archive, and
hardlinks pointing outside the tree are all rejected up front.
"""

from __future__ import annotations

import gzip
import io
import logging
import os
import shutil
import tarfile
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    DestCollision,
    EmptyRootfs,
    IoFailure,
    PathEscape,
    UnknownFormat,
)
from .image import (
    EntryKind,
    FlattenedRootfs,
    LayerEntry,
    canonical_tree,
    sanitize_image_name,
)

TOP_DIR_MODE = 0o755


@dataclass(frozen=True)
class RootfsArchive:
    """A packed rootfs on disk: gzip tar with a single top-level directory."""

    path: Path
    top_level_name: str


def pack(rootfs: FlattenedRootfs, image_name: str, out_path: str | Path,
         compress_level: int = 6) -> RootfsArchive:
    """Write the tree to ``out_path`` as <name>/... inside a tar.gz.

    Hardlink groups are stored with the lexicographically first member as
    the regular file and the rest as links to it, so sequential extraction
    always finds the target already on disk.  Symlink modes are recorded as
    0o777 (the only value Linux can restore).
    """
    if not rootfs.tree:
        raise EmptyRootfs("refusing to pack an empty rootfs")
    name = sanitize_image_name(image_name)
    out_path = Path(out_path)

    tree = canonical_tree(rootfs)
    try:
        with open(out_path, "wb") as raw:
            # mtime=0 in the gzip header keeps repeated packs byte-identical.
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw,
                               compresslevel=compress_level, mtime=0) as gz:
                with tarfile.open(fileobj=gz, mode="w", format=tarfile.PAX_FORMAT) as tf:
                    top = tarfile.TarInfo(name)
                    top.type = tarfile.DIRTYPE
                    top.mode = TOP_DIR_MODE
                    tf.addfile(top)
                    for path in sorted(tree):
                        _add_member(tf, name, tree[path])
    except OSError as exc:
        raise IoFailure(f"cannot write archive {out_path}: {exc}") from exc
    return RootfsArchive(path=out_path, top_level_name=name)


def _add_member(tf: tarfile.TarFile, top: str, entry: LayerEntry) -> None:
    info = tarfile.TarInfo(f"{top}/{entry.path}")
    info.mode = entry.mode
    info.mtime = int(entry.mtime)
    info.uid = info.gid = 0
    info.uname = info.gname = ""

    if entry.kind is EntryKind.DIR:
        info.type = tarfile.DIRTYPE
        tf.addfile(info)
    elif entry.kind is EntryKind.SYMLINK:
        info.type = tarfile.SYMTYPE
        info.mode = 0o777
        info.linkname = str(entry.payload)
        tf.addfile(info)
    elif entry.kind is EntryKind.HARDLINK:
        info.type = tarfile.LNKTYPE
        info.linkname = f"{top}/{entry.payload}"
        tf.addfile(info)
    elif entry.kind is EntryKind.FILE:
        payload = entry.payload if isinstance(entry.payload, bytes) else b""
        info.size = len(payload)
        tf.addfile(info, io.BytesIO(payload))
    else:
        raise IoFailure(f"cannot pack entry kind {entry.kind.value}: {entry.path}")


def load(path: str | Path) -> RootfsArchive:
    """Open an existing archive and identify its single top-level directory."""
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"no such archive: {path}")
    try:
        with tarfile.open(path, "r:gz") as tf:
            tops = {m.name.split("/", 1)[0] for m in tf}
    except (tarfile.TarError, OSError, EOFError) as exc:
        raise UnknownFormat(f"{path}: not a gzip tar archive ({exc})") from exc
    tops.discard("")
    if len(tops) != 1:
        raise UnknownFormat(
            f"{path}: expected exactly one top-level directory, found "
            f"{sorted(tops) if tops else 'none'}"
        )
    return RootfsArchive(path=path, top_level_name=tops.pop())


def unpack(archive: RootfsArchive | str | Path, dest: str | Path,
           overwrite: bool = False) -> Path:
    """Extract the archive under dest, returning dest/<top_level_name>.

    The whole member list is validated before the first write, so a
    rejected archive leaves the destination untouched.  An existing
    dest/<top_level_name> is an error unless ``overwrite`` is set, in which
    case it is removed first (no merging with stale content).
    """
    if not isinstance(archive, RootfsArchive):
        archive = load(archive)
    dest = Path(dest)
    if not dest.is_dir():
        raise IoFailure(f"unpack destination is not a directory: {dest}")

    target = dest / archive.top_level_name
    try:
        with tarfile.open(archive.path, "r:gz") as tf:
            members = tf.getmembers()
            _validate_members(members, archive.top_level_name)

            if target.exists() or target.is_symlink():
                if not overwrite:
                    raise DestCollision(
                        f"{target} already exists; pass overwrite to replace it"
                    )
                if target.is_dir() and not target.is_symlink():
                    shutil.rmtree(target)
                else:
                    target.unlink()

            _extract(tf, members, dest)
    except OSError as exc:
        raise IoFailure(f"unpack into {dest} failed: {exc}") from exc
    return target


def _split_clean(name: str) -> list[str]:
    """Split a member path, rejecting anything that could leave dest."""
    if name.startswith("/"):
        raise PathEscape(f"archive member has an absolute path: {name!r}")
    parts = [p for p in name.split("/") if p not in ("", ".")]
    if not parts:
        raise PathEscape(f"archive member has an empty path: {name!r}")
    if ".." in parts:
        raise PathEscape(f"archive member path contains '..': {name!r}")
    return parts


def _validate_members(members: list[tarfile.TarInfo], top: str) -> None:
    # Simulated extraction: track what each path would be, so a member that
    # routes through a symlink directory is caught before any disk write.
    kinds: dict[str, str] = {}
    for m in members:
        parts = _split_clean(m.name)
        if parts[0] != top:
            raise PathEscape(
                f"member {m.name!r} is outside the top-level directory {top!r}"
            )
        for depth in range(1, len(parts)):
            ancestor = "/".join(parts[:depth])
            if kinds.get(ancestor) == "symlink":
                raise PathEscape(
                    f"member {m.name!r} traverses symlink {ancestor!r}"
                )
        path = "/".join(parts)

        if m.isdir():
            kinds[path] = "dir"
        elif m.issym():
            kinds[path] = "symlink"
        elif m.islnk():
            link_parts = _split_clean(m.linkname)
            link_path = "/".join(link_parts)
            if link_parts[0] != top:
                raise PathEscape(
                    f"hardlink {m.name!r} targets {m.linkname!r} outside the tree"
                )
            if kinds.get(link_path) != "file":
                raise IoFailure(
                    f"hardlink {m.name!r} targets {m.linkname!r}, which is not "
                    f"a file extracted earlier in the archive"
                )
            kinds[path] = "file"
        elif m.isfile():
            kinds[path] = "file"
        elif m.isdev():
            continue
        else:
            raise UnknownFormat(
                f"unsupported member type {m.type!r} in archive: {m.name}"
            )


log = logging.getLogger(__name__)


def _extract(tf: tarfile.TarFile, members: list[tarfile.TarInfo], dest: Path) -> None:
    dir_meta: dict[str, tuple[int, int]] = {}

    for m in members:
        parts = _split_clean(m.name)
        path = dest.joinpath(*parts)
        rel = "/".join(parts)
        path.parent.mkdir(parents=True, exist_ok=True)

        if m.isdir():
            if path.is_symlink() or path.is_file():
                path.unlink()
            path.mkdir(exist_ok=True)
            dir_meta[rel] = (m.mode, int(m.mtime))
            continue

        if path.is_symlink() or (path.exists() and not path.is_file()):
            if path.is_dir() and not path.is_symlink():
                shutil.rmtree(path)
                dir_meta = {k: v for k, v in dir_meta.items()
                            if k != rel and not k.startswith(rel + "/")}
            else:
                path.unlink()

        if m.issym():
            if path.exists() or path.is_symlink():
                path.unlink()
            os.symlink(m.linkname, path)
            os.utime(path, (int(m.mtime), int(m.mtime)), follow_symlinks=False)
        elif m.islnk():
            link_target = dest.joinpath(*_split_clean(m.linkname))
            if path.exists():
                path.unlink()
            os.link(link_target, path)
        elif m.isfile():
            src = tf.extractfile(m)
            with open(path, "wb") as out:
                if src is not None:
                    shutil.copyfileobj(src, out)
            os.chmod(path, m.mode)
            os.utime(path, (int(m.mtime), int(m.mtime)))
        else:
            log.warning("skipping device/FIFO member: %s", m.name)

    # Children reset their parents' mtimes, so directory metadata lands last,
    # deepest first.
    for rel in sorted(dir_meta, key=lambda p: p.count("/"), reverse=True):
        mode, mtime = dir_meta[rel]
        full = dest / rel
        os.chmod(full, mode)
        os.utime(full, (mtime, mtime))
