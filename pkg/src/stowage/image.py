"""Parse container image inputs and squash their layers into one rootfs tree.

Two input shapes are accepted, both fully offline:

* an OCI image-layout directory (``index.json`` + ``blobs/sha256/...``), or
* a ``docker save`` tar (``manifest.json`` + per-layer tars).  Newer tars
  that embed an OCI layout (``index.json`` inside the tar) work too.

Flattening is a pure left fold of :func:`apply_layer` over the layers in
base-first order.  The result lives entirely in memory; the archive module
serializes it.  Whiteout entries (``.wh.`` basename prefix, opaque marker
``.wh..wh..opq``) delete paths contributed by earlier layers and never
appear in the output.
"""

from __future__ import annotations

import enum
import gzip
import hashlib
import io
import json
import logging
import os
import posixpath
import stat as stat_mod
import tarfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable

from .errors import (
    ConflictingKind,
    DigestMismatch,
    EmptyImage,
    HardlinkTargetMissing,
    MissingBlob,
    PathEscape,
    UnknownFormat,
)

log = logging.getLogger(__name__)

WHITEOUT_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"

# Media types whose payload is a gzip-compressed layer tar.  Anything else is
# sniffed by magic bytes, so unknown-but-plain tars still load.
_GZIP_MEDIA_TYPES = {
    "application/vnd.oci.image.layer.v1.tar+gzip",
    "application/vnd.docker.image.rootfs.diff.tar.gzip",
}
_ZSTD_SUFFIX = "+zstd"

OCI_REF_ANNOTATION = "org.opencontainers.image.ref.name"


class EntryKind(enum.Enum):
    FILE = "file"
    DIR = "dir"
    SYMLINK = "symlink"
    HARDLINK = "hardlink"
    WHITEOUT = "whiteout"
    OPAQUE = "opaque"


@dataclass(frozen=True)
class LayerEntry:
    """One filesystem entry inside a layer (or inside the flattened tree).

    ``payload`` is file content for FILE, the link target for SYMLINK (kept
    verbatim; may be absolute, it resolves inside the container) and the
    normalized in-image path of the target for HARDLINK.
    """

    path: str
    kind: EntryKind
    mode: int = 0o644
    payload: bytes | str | None = None
    mtime: int = 0

    def basename(self) -> str:
        return posixpath.basename(self.path)


@dataclass(frozen=True)
class LayerRef:
    """Reference to one layer blob: content digest + where to read it."""

    digest: str            # "sha256:<hex>" of the blob as stored
    location: str          # path in the blob store (format-specific)
    media_type: str = "application/vnd.oci.image.layer.v1.tar"


@dataclass
class ImageManifest:
    image_name: str
    layers: list[LayerRef]
    config_env: list[str] = field(default_factory=list)
    config_workdir: str | None = None


@dataclass
class FlattenedRootfs:
    """The squashed filesystem tree: relative path -> final entry."""

    tree: dict[str, LayerEntry]
    total_size_bytes: int

    def paths(self) -> list[str]:
        return sorted(self.tree)


# ---------------------------------------------------------------------------
# blob sources

class BlobSource:
    """Readable source of layer blobs; close() releases any open handles."""

    def open(self, ref: LayerRef) -> BinaryIO:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self) -> "BlobSource":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class OciLayoutSource(BlobSource):
    def __init__(self, root: Path):
        self.root = Path(root)

    def open(self, ref: LayerRef) -> BinaryIO:
        path = self.root / ref.location
        if not path.is_file():
            raise MissingBlob(f"layer blob not found: {path}")
        return open(path, "rb")


class DockerSaveSource(BlobSource):
    """Blobs are members of the save tar; handles stay valid until close()."""

    def __init__(self, tar_path: Path):
        self.tar_path = Path(tar_path)
        self._tf = tarfile.open(tar_path, "r:*")

    def open(self, ref: LayerRef) -> BinaryIO:
        try:
            fobj = self._tf.extractfile(ref.location)
        except KeyError:
            fobj = None
        if fobj is None:
            raise MissingBlob(f"member not found in save tar: {ref.location}")
        return fobj

    def close(self) -> None:
        self._tf.close()


class MemorySource(BlobSource):
    """In-memory blob dict keyed by location; used by generators and tests."""

    def __init__(self, blobs: dict[str, bytes]):
        self.blobs = blobs

    def open(self, ref: LayerRef) -> BinaryIO:
        if ref.location not in self.blobs:
            raise MissingBlob(f"no such blob: {ref.location}")
        return io.BytesIO(self.blobs[ref.location])


# ---------------------------------------------------------------------------
# path + digest helpers

def normalize_entry_path(raw: str) -> str:
    """Normalize a tar member path to a relative in-image path.

    Leading slashes and ``./`` are stripped; any surviving ``..`` component
    means the archive tries to escape its root and is rejected.
    """
    path = posixpath.normpath(raw.lstrip("/"))
    if path in (".", ""):
        return ""
    if path == ".." or path.startswith("../") or "/../" in path or path.endswith("/.."):
        raise PathEscape(f"entry path escapes the root: {raw!r}")
    return path


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _check_digest(data: bytes, digest: str, what: str) -> None:
    algo, _, want = digest.partition(":")
    if algo != "sha256":
        raise UnknownFormat(f"unsupported digest algorithm in {what}: {algo}")
    got = sha256_hex(data)
    if got != want:
        raise DigestMismatch(f"{what}: declared sha256:{want}, content is sha256:{got}")


def sanitize_image_name(ref: str) -> str:
    """Turn an image reference into a safe single path component."""
    name = ref.replace("/", "%").replace(":", "+")
    return name or "image"


# ---------------------------------------------------------------------------
# input parsing

def parse_image(input_path: str | Path) -> ImageManifest:
    """Parse an image input and verify every layer digest.

    Accepts an OCI image-layout directory or a docker-save tar.  The returned
    manifest lists layers base-first; each digest has been checked against
    the blob's actual content.
    """
    input_path = Path(input_path)
    if input_path.is_dir():
        if not (input_path / "index.json").is_file():
            raise UnknownFormat(
                f"{input_path}: directory has no index.json (not an OCI image layout)"
            )
        return _parse_oci_layout(_DirReader(input_path))
    if input_path.is_file():
        try:
            tf = tarfile.open(input_path, "r:*")
        except tarfile.TarError as exc:
            raise UnknownFormat(f"{input_path}: not a tar archive ({exc})") from exc
        with tf:
            names = set(tf.getnames())
            if "manifest.json" in names:
                return _parse_docker_save(tf, input_path)
            if "index.json" in names:
                return _parse_oci_layout(_TarReader(tf))
        raise UnknownFormat(
            f"{input_path}: tar has neither manifest.json nor index.json"
        )
    raise UnknownFormat(f"{input_path}: no such file or directory")


def open_blob_source(input_path: str | Path) -> BlobSource:
    """Open the blob store that backs the given image input."""
    input_path = Path(input_path)
    if input_path.is_dir():
        return OciLayoutSource(input_path)
    return DockerSaveSource(input_path)


class _DirReader:
    def __init__(self, root: Path):
        self.root = root

    def read(self, relpath: str) -> bytes:
        path = self.root / relpath
        if not path.is_file():
            raise MissingBlob(f"missing blob: {path}")
        return path.read_bytes()


class _TarReader:
    def __init__(self, tf: tarfile.TarFile):
        self.tf = tf

    def read(self, relpath: str) -> bytes:
        try:
            fobj = self.tf.extractfile(relpath)
        except KeyError:
            fobj = None
        if fobj is None:
            raise MissingBlob(f"missing member: {relpath}")
        return fobj.read()


def _blob_location(digest: str) -> str:
    algo, _, hexpart = digest.partition(":")
    return f"blobs/{algo}/{hexpart}"


def _parse_oci_layout(reader) -> ImageManifest:
    index = json.loads(reader.read("index.json"))
    manifests = index.get("manifests") or []
    if not manifests:
        raise UnknownFormat("index.json lists no manifests")
    desc = manifests[0]
    if len(manifests) > 1:
        log.warning("index lists %d manifests; using the first", len(manifests))

    image_name = (desc.get("annotations") or {}).get(OCI_REF_ANNOTATION, "")

    manifest_bytes = reader.read(_blob_location(desc["digest"]))
    _check_digest(manifest_bytes, desc["digest"], "image manifest")
    manifest = json.loads(manifest_bytes)

    # A nested index (multi-platform) gets one more hop, first entry again.
    if manifest.get("mediaType", "").endswith("image.index.v1+json"):
        sub = (manifest.get("manifests") or [])
        if not sub:
            raise UnknownFormat("nested image index lists no manifests")
        manifest_bytes = reader.read(_blob_location(sub[0]["digest"]))
        _check_digest(manifest_bytes, sub[0]["digest"], "image manifest")
        manifest = json.loads(manifest_bytes)

    config_env, config_workdir = [], None
    config_desc = manifest.get("config")
    if config_desc:
        config_bytes = reader.read(_blob_location(config_desc["digest"]))
        _check_digest(config_bytes, config_desc["digest"], "image config")
        config_env, config_workdir = _read_config(json.loads(config_bytes))

    layers = []
    for layer in manifest.get("layers", []):
        media = layer.get("mediaType", "")
        if media.endswith(_ZSTD_SUFFIX):
            raise UnknownFormat(f"zstd-compressed layers are not supported: {media}")
        location = _blob_location(layer["digest"])
        blob = reader.read(location)
        _check_digest(blob, layer["digest"], f"layer blob {layer['digest'][:19]}")
        layers.append(LayerRef(digest=layer["digest"], location=location, media_type=media))

    return ImageManifest(
        image_name=sanitize_image_name(image_name),
        layers=layers,
        config_env=config_env,
        config_workdir=config_workdir,
    )


def _parse_docker_save(tf: tarfile.TarFile, tar_path: Path) -> ImageManifest:
    reader = _TarReader(tf)
    entries = json.loads(reader.read("manifest.json"))
    if not entries:
        raise UnknownFormat("manifest.json lists no images")
    entry = entries[0]
    if len(entries) > 1:
        log.warning("save tar holds %d images; using the first", len(entries))

    repo_tags = entry.get("RepoTags") or []
    image_name = repo_tags[0] if repo_tags else tar_path.stem

    config = json.loads(reader.read(entry["Config"]))
    config_env, config_workdir = _read_config(config)
    diff_ids = (config.get("rootfs") or {}).get("diff_ids") or []

    layer_paths = entry.get("Layers") or []
    if diff_ids and len(diff_ids) != len(layer_paths):
        raise UnknownFormat(
            f"config lists {len(diff_ids)} diff_ids but manifest lists "
            f"{len(layer_paths)} layers"
        )

    layers = []
    for i, location in enumerate(layer_paths):
        blob = reader.read(location)
        # Layer members of a save tar are uncompressed, so the diff_id is the
        # content hash of the member itself.
        digest = diff_ids[i] if diff_ids else "sha256:" + sha256_hex(blob)
        _check_digest(blob, digest, f"layer {location}")
        layers.append(LayerRef(digest=digest, location=location,
                               media_type="application/vnd.docker.image.rootfs.diff.tar"))

    return ImageManifest(
        image_name=sanitize_image_name(image_name),
        layers=layers,
        config_env=config_env,
        config_workdir=config_workdir,
    )


def _read_config(config: dict) -> tuple[list[str], str | None]:
    inner = config.get("config") or {}
    env = list(inner.get("Env") or [])
    workdir = inner.get("WorkingDir") or None
    return env, workdir


# ---------------------------------------------------------------------------
# layer reading

def layer_entries(blob: BinaryIO, media_type: str = "") -> list[LayerEntry]:
    """Read one layer blob into an ordered entry list.

    Gzip is detected from the media type or the magic bytes.  Device nodes
    and FIFOs are skipped with a warning (an unprivileged user cannot
    recreate them at unpack time); setuid/setgid bits are stripped; owners
    are discarded entirely.
    """
    data = blob.read()
    if media_type in _GZIP_MEDIA_TYPES or data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)

    entries: list[LayerEntry] = []
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:") as tf:
        for member in tf:
            path = normalize_entry_path(member.name)
            if not path:
                continue
            if member.isdev():
                log.warning("skipping device/FIFO entry: %s", member.name)
                continue
            entries.append(_entry_from_member(tf, member, path))
    return entries


def _entry_from_member(tf: tarfile.TarFile, member: tarfile.TarInfo, path: str) -> LayerEntry:
    mode = _normalize_mode(member.mode, member.isdir())
    mtime = int(member.mtime)
    base = posixpath.basename(path)

    if base == OPAQUE_MARKER:
        return LayerEntry(path=path, kind=EntryKind.OPAQUE, mode=mode, mtime=mtime)
    if base.startswith(WHITEOUT_PREFIX):
        return LayerEntry(path=path, kind=EntryKind.WHITEOUT, mode=mode, mtime=mtime)
    if member.isdir():
        return LayerEntry(path=path, kind=EntryKind.DIR, mode=mode, mtime=mtime)
    if member.issym():
        return LayerEntry(path=path, kind=EntryKind.SYMLINK, mode=mode,
                          payload=member.linkname, mtime=mtime)
    if member.islnk():
        target = normalize_entry_path(member.linkname)
        return LayerEntry(path=path, kind=EntryKind.HARDLINK, mode=mode,
                          payload=target, mtime=mtime)
    if member.isfile():
        fobj = tf.extractfile(member)
        payload = fobj.read() if fobj is not None else b""
        return LayerEntry(path=path, kind=EntryKind.FILE, mode=mode,
                          payload=payload, mtime=mtime)
    raise UnknownFormat(f"unsupported tar member type {member.type!r}: {member.name}")


def _normalize_mode(mode: int, is_dir: bool) -> int:
    """Strip setuid/setgid, guarantee the owner can traverse and rewrite.

    The invoking user owns every extracted entry, so read-only-to-owner
    modes would only break later unpacking and deletion.
    """
    mode &= 0o1777
    mode |= 0o700 if is_dir else 0o600
    return mode


# ---------------------------------------------------------------------------
# flattening

def apply_layer(tree: dict[str, LayerEntry], layer: Iterable[LayerEntry]) -> dict[str, LayerEntry]:
    """Apply one layer to the tree built from all earlier layers.

    Whiteouts and opaque markers affect earlier layers only, so they are
    applied first; the layer's regular entries then land in order.
    """
    regular: list[LayerEntry] = []
    for entry in layer:
        if entry.kind is EntryKind.OPAQUE:
            _delete_children(tree, posixpath.dirname(entry.path))
        elif entry.kind is EntryKind.WHITEOUT:
            target = posixpath.join(posixpath.dirname(entry.path),
                                    entry.basename()[len(WHITEOUT_PREFIX):])
            _delete_subtree(tree, target)
        else:
            regular.append(entry)

    for entry in regular:
        _insert(tree, entry)
    return tree


def _delete_subtree(tree: dict[str, LayerEntry], path: str) -> None:
    tree.pop(path, None)
    _delete_children(tree, path)


def _delete_children(tree: dict[str, LayerEntry], path: str) -> None:
    if not path:
        # Opaque marker at the root would wipe the whole tree so far.
        tree.clear()
        return
    prefix = path + "/"
    for key in [k for k in tree if k.startswith(prefix)]:
        del tree[key]


IMPLICIT_DIR_MODE = 0o755


def _insert(tree: dict[str, LayerEntry], entry: LayerEntry) -> None:
    _ensure_parents(tree, entry.path)
    existing = tree.get(entry.path)
    if existing is not None and existing.kind is EntryKind.DIR:
        if entry.kind is EntryKind.DIR:
            # Directory over directory refreshes metadata, children survive.
            tree[entry.path] = entry
            return
        _delete_children(tree, entry.path)
    tree[entry.path] = entry


def _ensure_parents(tree: dict[str, LayerEntry], path: str) -> None:
    parent = posixpath.dirname(path)
    missing = []
    while parent:
        existing = tree.get(parent)
        if existing is not None:
            if existing.kind is not EntryKind.DIR:
                # Inserting through a file or symlink ancestor is how layer
                # archives smuggle writes outside the tree; refuse it.
                raise ConflictingKind(
                    f"cannot create {path!r}: ancestor {parent!r} is a {existing.kind.value}"
                )
            break
        missing.append(parent)
        parent = posixpath.dirname(parent)
    for dirpath in reversed(missing):
        tree[dirpath] = LayerEntry(path=dirpath, kind=EntryKind.DIR,
                                   mode=IMPLICIT_DIR_MODE, mtime=0)


def flatten(manifest: ImageManifest, blob_source: BlobSource) -> FlattenedRootfs:
    """Left-fold the image's layers into a single rootfs tree."""
    if not manifest.layers:
        raise EmptyImage(f"image {manifest.image_name!r} has no layers")

    tree: dict[str, LayerEntry] = {}
    for ref in manifest.layers:
        with blob_source.open(ref) as blob:
            entries = layer_entries(blob, ref.media_type)
        apply_layer(tree, entries)

    _check_hardlinks(tree)
    total = sum(len(e.payload) for e in tree.values()
                if e.kind is EntryKind.FILE and e.payload is not None)
    return FlattenedRootfs(tree=tree, total_size_bytes=total)


def _check_hardlinks(tree: dict[str, LayerEntry]) -> None:
    for entry in tree.values():
        if entry.kind is not EntryKind.HARDLINK:
            continue
        target, seen = entry, set()
        while target.kind is EntryKind.HARDLINK:
            if target.path in seen:
                raise HardlinkTargetMissing(f"hardlink cycle through {target.path!r}")
            seen.add(target.path)
            nxt = tree.get(str(target.payload))
            if nxt is None:
                raise HardlinkTargetMissing(
                    f"hardlink {entry.path!r} points at deleted path {target.payload!r}"
                )
            target = nxt
        if target.kind is not EntryKind.FILE:
            raise HardlinkTargetMissing(
                f"hardlink {entry.path!r} resolves to a {target.kind.value}, not a file"
            )


def flatten_image(input_path: str | Path) -> tuple[ImageManifest, FlattenedRootfs]:
    """Parse + flatten in one step; the usual entry point for the CLI."""
    manifest = parse_image(input_path)
    with open_blob_source(input_path) as source:
        rootfs = flatten(manifest, source)
    return manifest, rootfs


# ---------------------------------------------------------------------------
# directory scanning (the reverse direction: disk tree -> FlattenedRootfs)

def rootfs_from_dir(root: str | Path) -> FlattenedRootfs:
    """Scan an on-disk tree into a FlattenedRootfs.

    Hardlink groups are detected via inode numbers; the lexicographically
    first path of a group becomes the FILE entry, the rest HARDLINKs to it.
    """
    root = Path(root)
    tree: dict[str, LayerEntry] = {}
    inode_first: dict[tuple[int, int], str] = {}
    total = 0

    paths = sorted(
        posixpath.relpath(posixpath.join(dirpath, name), str(root))
        for dirpath, dirnames, filenames in os.walk(root)
        for name in dirnames + filenames
    )
    for rel in paths:
        full = root / rel
        st = os.lstat(full)
        mode = st.st_mode & 0o7777
        mtime = int(st.st_mtime)
        if stat_mod.S_ISLNK(st.st_mode):
            tree[rel] = LayerEntry(rel, EntryKind.SYMLINK, mode=mode,
                                   payload=os.readlink(full), mtime=mtime)
        elif stat_mod.S_ISDIR(st.st_mode):
            tree[rel] = LayerEntry(rel, EntryKind.DIR, mode=mode, mtime=mtime)
        else:
            key = (st.st_dev, st.st_ino)
            if st.st_nlink > 1 and key in inode_first:
                tree[rel] = LayerEntry(rel, EntryKind.HARDLINK, mode=mode,
                                       payload=inode_first[key], mtime=mtime)
                continue
            inode_first[key] = rel
            payload = full.read_bytes()
            total += len(payload)
            tree[rel] = LayerEntry(rel, EntryKind.FILE, mode=mode,
                                   payload=payload, mtime=mtime)
    return FlattenedRootfs(tree=tree, total_size_bytes=total)


def canonical_tree(rootfs: FlattenedRootfs) -> dict[str, LayerEntry]:
    """Rewrite hardlink groups so comparisons ignore which member is FILE.

    Within each group the lexicographically first path carries the payload;
    every other member becomes a HARDLINK to it.  Hardlink mtimes mirror the
    shared inode, so they are normalized to the carrier's.
    """
    tree = rootfs.tree
    groups: dict[str, list[str]] = {}
    resolved: dict[str, str] = {}

    def resolve(path: str) -> str:
        entry = tree[path]
        while entry.kind is EntryKind.HARDLINK:
            path = str(entry.payload)
            entry = tree[path]
        return path

    for path, entry in tree.items():
        if entry.kind in (EntryKind.FILE, EntryKind.HARDLINK):
            target = resolve(path)
            resolved[path] = target
            groups.setdefault(target, []).append(path)

    out: dict[str, LayerEntry] = {}
    for path, entry in tree.items():
        if entry.kind in (EntryKind.FILE, EntryKind.HARDLINK):
            target = resolved[path]
            members = groups[target]
            carrier = min(members)
            payload = tree[target].payload
            if path == carrier:
                out[path] = replace(tree[target], path=path, kind=EntryKind.FILE,
                                    payload=payload)
            else:
                out[path] = replace(tree[target], path=path, kind=EntryKind.HARDLINK,
                                    payload=carrier)
        else:
            out[path] = entry
    return out
