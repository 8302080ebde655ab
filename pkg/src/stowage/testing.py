"""Builders for synthetic image inputs.

These exist so the test suite and the demo scripts can create OCI image
layouts and docker-save tars from entry lists, entirely offline.  The
builders write exactly the structures the parser consumes: index + blob
store on the OCI side, manifest.json + per-layer tars on the docker-save
side, with correct digests in both.
"""

from __future__ import annotations

import gzip
import io
import json
import tarfile
from pathlib import Path
from typing import Iterable, Sequence

from .image import (
    OCI_REF_ANNOTATION,
    OPAQUE_MARKER,
    WHITEOUT_PREFIX,
    EntryKind,
    FlattenedRootfs,
    LayerEntry,
    canonical_tree,
    sha256_hex,
)

Layer = Sequence[LayerEntry]


def file_entry(path: str, content: bytes = b"", mode: int = 0o644,
               mtime: int = 0) -> LayerEntry:
    return LayerEntry(path=path, kind=EntryKind.FILE, mode=mode,
                      payload=content, mtime=mtime)


def dir_entry(path: str, mode: int = 0o755, mtime: int = 0) -> LayerEntry:
    return LayerEntry(path=path, kind=EntryKind.DIR, mode=mode, mtime=mtime)


def symlink_entry(path: str, target: str, mtime: int = 0) -> LayerEntry:
    return LayerEntry(path=path, kind=EntryKind.SYMLINK, mode=0o777,
                      payload=target, mtime=mtime)


def hardlink_entry(path: str, target: str, mtime: int = 0) -> LayerEntry:
    return LayerEntry(path=path, kind=EntryKind.HARDLINK, mode=0o644,
                      payload=target, mtime=mtime)


def whiteout(path: str) -> LayerEntry:
    """A deletion marker for ``path`` (the ``.wh.`` goes on the basename)."""
    parent, _, name = path.rpartition("/")
    marked = f"{parent}/{WHITEOUT_PREFIX}{name}" if parent else WHITEOUT_PREFIX + name
    return LayerEntry(path=marked, kind=EntryKind.WHITEOUT, mode=0o644)


def opaque(dirpath: str) -> LayerEntry:
    """An opaque marker masking all lower content of ``dirpath``."""
    marked = f"{dirpath}/{OPAQUE_MARKER}" if dirpath else OPAQUE_MARKER
    return LayerEntry(path=marked, kind=EntryKind.OPAQUE, mode=0o644)


def build_layer_tar(entries: Layer, compress: bool = False) -> bytes:
    """Serialize entries to an (optionally gzipped) layer tar, in order."""
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.PAX_FORMAT) as tf:
        for entry in entries:
            info = tarfile.TarInfo(entry.path)
            info.mode = entry.mode
            info.mtime = int(entry.mtime)
            info.uid = info.gid = 0
            if entry.kind is EntryKind.DIR:
                info.type = tarfile.DIRTYPE
                tf.addfile(info)
            elif entry.kind is EntryKind.SYMLINK:
                info.type = tarfile.SYMTYPE
                info.linkname = str(entry.payload)
                tf.addfile(info)
            elif entry.kind is EntryKind.HARDLINK:
                info.type = tarfile.LNKTYPE
                info.linkname = str(entry.payload)
                tf.addfile(info)
            elif entry.kind in (EntryKind.FILE, EntryKind.WHITEOUT,
                                EntryKind.OPAQUE):
                payload = entry.payload if isinstance(entry.payload, bytes) else b""
                info.size = len(payload)
                tf.addfile(info, io.BytesIO(payload))
            else:
                raise ValueError(f"cannot serialize entry kind {entry.kind}")
    raw = buffer.getvalue()
    return gzip.compress(raw, mtime=0) if compress else raw


def rootfs_layer(rootfs: FlattenedRootfs) -> list[LayerEntry]:
    """The tree as one layer, sorted so parents and link targets come first."""
    tree = canonical_tree(rootfs)
    return [tree[path] for path in sorted(tree)]


def _descriptor(media_type: str, blob: bytes) -> dict:
    return {
        "mediaType": media_type,
        "digest": "sha256:" + sha256_hex(blob),
        "size": len(blob),
    }


def write_oci_layout(dest: str | Path, layers: Iterable[Layer],
                     image_name: str = "demo/app:latest",
                     env: Sequence[str] = (), workdir: str | None = None,
                     compress: bool = False) -> Path:
    """Write a complete OCI image layout under ``dest`` and return it."""
    dest = Path(dest)
    blobs = dest / "blobs" / "sha256"
    blobs.mkdir(parents=True, exist_ok=True)
    (dest / "oci-layout").write_text(
        json.dumps({"imageLayoutVersion": "1.0.0"}) + "\n")

    def put(blob: bytes) -> None:
        (blobs / sha256_hex(blob)).write_bytes(blob)

    layer_descs, diff_ids = [], []
    for layer in layers:
        raw = build_layer_tar(layer)
        diff_ids.append("sha256:" + sha256_hex(raw))
        if compress:
            blob = gzip.compress(raw, mtime=0)
            media = "application/vnd.oci.image.layer.v1.tar+gzip"
        else:
            blob, media = raw, "application/vnd.oci.image.layer.v1.tar"
        put(blob)
        layer_descs.append(_descriptor(media, blob))

    config_bytes = json.dumps({
        "architecture": "amd64",
        "os": "linux",
        "config": {"Env": list(env), "WorkingDir": workdir or ""},
        "rootfs": {"type": "layers", "diff_ids": diff_ids},
    }).encode()
    put(config_bytes)

    manifest_bytes = json.dumps({
        "schemaVersion": 2,
        "mediaType": "application/vnd.oci.image.manifest.v1+json",
        "config": _descriptor("application/vnd.oci.image.config.v1+json",
                              config_bytes),
        "layers": layer_descs,
    }).encode()
    put(manifest_bytes)

    index_entry = _descriptor("application/vnd.oci.image.manifest.v1+json",
                              manifest_bytes)
    index_entry["annotations"] = {OCI_REF_ANNOTATION: image_name}
    (dest / "index.json").write_text(json.dumps({
        "schemaVersion": 2,
        "manifests": [index_entry],
    }) + "\n")
    return dest


def write_docker_save(dest: str | Path, layers: Iterable[Layer],
                      repo_tag: str = "demo/app:latest",
                      env: Sequence[str] = (),
                      workdir: str | None = None) -> Path:
    """Write a docker-save style tar to ``dest`` and return it."""
    dest = Path(dest)
    layer_blobs = [build_layer_tar(layer) for layer in layers]
    diff_ids = ["sha256:" + sha256_hex(blob) for blob in layer_blobs]
    layer_names = [f"{sha256_hex(blob)}/layer.tar" for blob in layer_blobs]

    config_bytes = json.dumps({
        "architecture": "amd64",
        "os": "linux",
        "config": {"Env": list(env), "WorkingDir": workdir or ""},
        "rootfs": {"type": "layers", "diff_ids": diff_ids},
    }).encode()
    config_name = sha256_hex(config_bytes) + ".json"

    manifest_bytes = json.dumps([{
        "Config": config_name,
        "RepoTags": [repo_tag],
        "Layers": layer_names,
    }]).encode()

    with tarfile.open(dest, "w") as tf:
        def add(name: str, blob: bytes) -> None:
            info = tarfile.TarInfo(name)
            info.size = len(blob)
            tf.addfile(info, io.BytesIO(blob))

        for name, blob in zip(layer_names, layer_blobs):
            add(name, blob)
        add(config_name, config_bytes)
        add("manifest.json", manifest_bytes)
    return dest
