"""Rootfs archive pack/unpack: format, round trip, hostile inputs."""

from __future__ import annotations

import gzip
import io
import random
import tarfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stowage.archive import load, pack, unpack
from stowage.errors import (
    DestCollision,
    EmptyRootfs,
    IoFailure,
    PathEscape,
    UnknownFormat,
)
from stowage.image import FlattenedRootfs, canonical_tree, rootfs_from_dir
from stowage.testing import (
    dir_entry,
    file_entry,
    hardlink_entry,
    symlink_entry,
)

from generators import random_rootfs
from oracles import dir_is_empty

SMALL_TREE = {
    e.path: e
    for e in (
        dir_entry("bin", 0o755, mtime=100),
        file_entry("bin/tool", b"#!/bin/sh\n", 0o755, mtime=200),
        dir_entry("etc", 0o700, mtime=300),
        file_entry("etc/conf", b"key=value\n", 0o600, mtime=400),
        symlink_entry("etc/alias", "conf"),
        file_entry(".hidden", b"dot", 0o644, mtime=500),
    )
}


def small_rootfs() -> FlattenedRootfs:
    size = sum(len(e.payload) for e in SMALL_TREE.values()
               if isinstance(e.payload, bytes))
    return FlattenedRootfs(tree=dict(SMALL_TREE), total_size_bytes=size)


def tree_of(path) -> dict:
    return canonical_tree(rootfs_from_dir(path))


# ---------------------------------------------------------------------------
# pack

def test_members_live_under_one_top_dir(tmp_path):
    archive = pack(small_rootfs(), "web/app:2.1", tmp_path / "a.tar.gz")
    with tarfile.open(archive.path, "r:gz") as tf:
        names = tf.getnames()
    top = archive.top_level_name
    assert top == "web%app+2.1"
    assert all(n == top or n.startswith(top + "/") for n in names)
    # every tree path is present, prefixed
    assert set(names) == {top} | {f"{top}/{p}" for p in SMALL_TREE}


def test_pack_is_deterministic(tmp_path):
    a = pack(small_rootfs(), "img", tmp_path / "a.tar.gz")
    b = pack(small_rootfs(), "img", tmp_path / "b.tar.gz")
    assert a.path.read_bytes() == b.path.read_bytes()


def test_empty_rootfs_refused(tmp_path):
    empty = FlattenedRootfs(tree={}, total_size_bytes=0)
    with pytest.raises(EmptyRootfs):
        pack(empty, "img", tmp_path / "a.tar.gz")


def test_load_rejects_multiple_top_dirs(tmp_path):
    path = tmp_path / "two-tops.tar.gz"
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w") as tf:
        for name in ("one/f", "two/f"):
            info = tarfile.TarInfo(name)
            info.size = 0
            tf.addfile(info, io.BytesIO(b""))
    path.write_bytes(gzip.compress(raw.getvalue()))
    with pytest.raises(UnknownFormat):
        load(path)


def test_load_rejects_non_gzip(tmp_path):
    path = tmp_path / "plain.tar.gz"
    path.write_bytes(b"certainly not a tarball")
    with pytest.raises(UnknownFormat):
        load(path)
    with pytest.raises(IoFailure):
        load(tmp_path / "missing.tar.gz")


# ---------------------------------------------------------------------------
# round trip

def test_round_trip_preserves_tree_and_metadata(tmp_path):
    rootfs = small_rootfs()
    archive = pack(rootfs, "img", tmp_path / "a.tar.gz")
    (tmp_path / "out").mkdir()
    target = unpack(archive, tmp_path / "out", overwrite=False)
    assert target == tmp_path / "out" / archive.top_level_name
    got = tree_of(target)
    assert got == canonical_tree(rootfs)
    # spot-check that metadata really landed on disk
    conf = target / "etc" / "conf"
    assert conf.stat().st_mode & 0o7777 == 0o600
    assert conf.stat().st_mtime == 400
    assert (target / "etc").stat().st_mtime == 300


def test_unpack_accepts_bare_path(tmp_path):
    archive = pack(small_rootfs(), "img", tmp_path / "a.tar.gz")
    (tmp_path / "out").mkdir()
    target = unpack(archive.path, tmp_path / "out")
    assert (target / "bin" / "tool").read_bytes() == b"#!/bin/sh\n"


def test_round_trip_preserves_hardlinks(tmp_path):
    tree = {
        e.path: e
        for e in (
            file_entry("data", b"shared", 0o644, mtime=10),
            hardlink_entry("alias", "data"),
        )
    }
    rootfs = FlattenedRootfs(tree=tree, total_size_bytes=6)
    archive = pack(rootfs, "img", tmp_path / "a.tar.gz")
    (tmp_path / "out").mkdir()
    target = unpack(archive, tmp_path / "out")
    a, b = (target / "data").stat(), (target / "alias").stat()
    assert a.st_ino == b.st_ino
    assert tree_of(target) == canonical_tree(rootfs)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 32))
def test_round_trip_random_trees(tmp_path_factory, seed):
    rng = random.Random(seed)
    rootfs = random_rootfs(rng)
    scratch = tmp_path_factory.mktemp("rt")
    archive = pack(rootfs, f"gen/tree:{seed}", scratch / "a.tar.gz")
    target = unpack(archive, scratch)
    assert tree_of(target) == canonical_tree(rootfs)


def test_unpacked_dir_repacks_identically(tmp_path):
    rootfs = random_rootfs(random.Random(11))
    first = pack(rootfs, "img", tmp_path / "a.tar.gz")
    (tmp_path / "out").mkdir()
    target = unpack(first, tmp_path / "out")
    second = pack(rootfs_from_dir(target), "img", tmp_path / "b.tar.gz")
    assert first.path.read_bytes() == second.path.read_bytes()


# ---------------------------------------------------------------------------
# destination handling

def test_existing_target_collides(tmp_path):
    archive = pack(small_rootfs(), "img", tmp_path / "a.tar.gz")
    unpack(archive, tmp_path)
    with pytest.raises(DestCollision):
        unpack(archive, tmp_path)


def test_overwrite_replaces_stale_files(tmp_path):
    archive = pack(small_rootfs(), "img", tmp_path / "a.tar.gz")
    target = unpack(archive, tmp_path)
    stale = target / "bin" / "stale-extra"
    stale.write_text("left over from an older unpack")
    target2 = unpack(archive, tmp_path, overwrite=True)
    assert target2 == target
    assert not stale.exists()
    assert tree_of(target2) == canonical_tree(small_rootfs())


def test_dest_must_be_a_directory(tmp_path):
    archive = pack(small_rootfs(), "img", tmp_path / "a.tar.gz")
    not_a_dir = tmp_path / "file"
    not_a_dir.write_text("x")
    with pytest.raises(IoFailure):
        unpack(archive, not_a_dir)
    with pytest.raises(IoFailure):
        unpack(archive, tmp_path / "missing-dir")


# ---------------------------------------------------------------------------
# hostile archives
#
# Each crafted tarball keeps a single top-level dir so it passes load();
# the escape must be caught by member validation, before any extraction.

def hostile_archive(tmp_path, members) -> object:
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.PAX_FORMAT) as tf:
        topinfo = tarfile.TarInfo("top")
        topinfo.type = tarfile.DIRTYPE
        topinfo.mode = 0o755
        tf.addfile(topinfo)
        for info, data in members:
            tf.addfile(info, io.BytesIO(data) if data is not None else None)
    path = tmp_path / "hostile.tar.gz"
    path.write_bytes(gzip.compress(raw.getvalue()))
    return load(path)


def file_info(name, data=b"owned"):
    info = tarfile.TarInfo(name)
    info.size = len(data)
    return info, data


def assert_nothing_written(dest, outside):
    assert dir_is_empty(dest)
    assert not outside.exists()


def test_dotdot_member_rejected(tmp_path):
    archive = hostile_archive(tmp_path, [file_info("top/../../evil")])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(PathEscape):
        unpack(archive, dest)
    assert_nothing_written(dest, tmp_path / "evil")


def test_absolute_member_rejected(tmp_path):
    from pathlib import Path

    archive = hostile_archive(tmp_path, [file_info("/top/abs-evil")])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(PathEscape):
        unpack(archive, dest)
    assert_nothing_written(dest, Path("/top/abs-evil"))


def test_member_outside_top_dir_rejected(tmp_path):
    # passes the single-top check only if it hides behind "top" lexically;
    # a sibling member must fail load() outright
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w") as tf:
        for name in ("top/ok", "sneaky"):
            info = tarfile.TarInfo(name)
            info.size = 0
            tf.addfile(info, io.BytesIO(b""))
    path = tmp_path / "sibling.tar.gz"
    path.write_bytes(gzip.compress(raw.getvalue()))
    with pytest.raises(UnknownFormat):
        load(path)


def test_symlink_parent_traversal_rejected(tmp_path):
    sneak = tarfile.TarInfo("top/link")
    sneak.type = tarfile.SYMTYPE
    sneak.linkname = "/"
    archive = hostile_archive(tmp_path, [
        (sneak, None),
        file_info("top/link/etc-evil"),
    ])
    dest = tmp_path / "dest"
    dest.mkdir()
    from pathlib import Path

    with pytest.raises(PathEscape):
        unpack(archive, dest)
    assert_nothing_written(dest, Path("/etc-evil"))


def test_relative_symlink_traversal_rejected(tmp_path):
    sneak = tarfile.TarInfo("top/updir")
    sneak.type = tarfile.SYMTYPE
    sneak.linkname = "../../.."
    archive = hostile_archive(tmp_path, [
        (sneak, None),
        file_info("top/updir/rel-evil"),
    ])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(PathEscape):
        unpack(archive, dest)
    assert dir_is_empty(dest)


def test_hardlink_escape_rejected(tmp_path):
    link = tarfile.TarInfo("top/pw")
    link.type = tarfile.LNKTYPE
    link.linkname = "../../../../etc/passwd"
    archive = hostile_archive(tmp_path, [(link, None)])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(PathEscape):
        unpack(archive, dest)
    assert dir_is_empty(dest)


def test_hardlink_to_unextracted_target_rejected(tmp_path):
    link = tarfile.TarInfo("top/early")
    link.type = tarfile.LNKTYPE
    link.linkname = "top/late"          # appears after the link member
    archive = hostile_archive(tmp_path, [
        (link, None),
        file_info("top/late"),
    ])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(IoFailure):
        unpack(archive, dest)
    assert dir_is_empty(dest)


def test_unknown_member_type_rejected(tmp_path):
    weird = tarfile.TarInfo("top/odd")
    weird.type = b"Z"                   # not a POSIX tar type
    archive = hostile_archive(tmp_path, [(weird, None)])
    dest = tmp_path / "dest"
    dest.mkdir()
    with pytest.raises(UnknownFormat):
        unpack(archive, dest)
    assert dir_is_empty(dest)


def test_symlink_member_itself_is_allowed(tmp_path):
    # symlinks may point anywhere; only traversal THROUGH them is blocked
    link = tarfile.TarInfo("top/absolute-link")
    link.type = tarfile.SYMTYPE
    link.linkname = "/etc/hostname"
    archive = hostile_archive(tmp_path, [(link, None)])
    dest = tmp_path / "dest"
    dest.mkdir()
    target = unpack(archive, dest)
    import os

    assert os.readlink(target / "absolute-link") == "/etc/hostname"
