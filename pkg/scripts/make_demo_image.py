#!/usr/bin/env python3
"""Build a small synthetic container image for trying out the pipeline.

The image is written either as an OCI image layout directory or as a
docker-save style tar.  It carries two layers on purpose: the second one
deletes a file from the first through a whiteout marker, so flattening
has visible work to do.

With gcc on the host, two tiny statically linked programs are compiled
into the image (/bin/echo prints its arguments, /bin/ids prints the
current uid/gid), which makes the result runnable end to end:

    python3 scripts/make_demo_image.py /tmp/demo-image
    stowage flatten /tmp/demo-image /tmp/app.tar.gz --env-out /tmp/app.env
    mkdir -p /tmp/nodes && stowage unpack /tmp/app.tar.gz /tmp/nodes
    stowage run /tmp/nodes/demo%app+latest -- /bin/echo "container hello world!"

Without gcc, pass --binary to embed pre-built static executables, or
build an image that only carries data files (still fine for flatten,
pack, and unpack).
"""

from __future__ import annotations

import argparse
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

from stowage.image import sanitize_image_name
from stowage.testing import (
    dir_entry,
    file_entry,
    symlink_entry,
    whiteout,
    write_docker_save,
    write_oci_layout,
)

ECHO_SOURCE = r"""
#include <stdio.h>
int main(int argc, char **argv) {
    for (int i = 1; i < argc; i++) {
        fputs(argv[i], stdout);
        putchar(i + 1 < argc ? ' ' : '\n');
    }
    return 0;
}
"""

IDS_SOURCE = r"""
#include <stdio.h>
#include <unistd.h>
int main(void) {
    printf("uid=%d gid=%d\n", (int)getuid(), (int)getgid());
    return 0;
}
"""


def compile_static(source: str, out: Path) -> bool:
    gcc = shutil.which("gcc")
    if gcc is None:
        return False
    with tempfile.NamedTemporaryFile("w", suffix=".c", delete=False) as handle:
        handle.write(source)
        c_path = handle.name
    try:
        result = subprocess.run(
            [gcc, "-O2", "-static", "-o", str(out), c_path],
            capture_output=True, text=True)
    finally:
        Path(c_path).unlink()
    if result.returncode != 0:
        print(result.stderr.strip(), file=sys.stderr)
        return False
    return True


def parse_binary(arg: str) -> tuple[str, Path]:
    dst, sep, src = arg.partition("=")
    if not sep or not dst or not src:
        raise argparse.ArgumentTypeError(
            f"expected DEST=SOURCE, got {arg!r}")
    return dst.lstrip("/"), Path(src)


def build_layers(binaries: list[tuple[str, Path]]) -> list[list]:
    base = [
        dir_entry("bin", 0o755),
        dir_entry("etc", 0o755),
        file_entry("etc/os-release", b"NAME=demo\nVERSION_ID=1\n"),
        file_entry("etc/motd", b"left over from the base layer\n"),
        dir_entry("usr", 0o755),
        symlink_entry("usr/bin", "../bin"),
    ]
    for dst, src in binaries:
        base.append(file_entry(dst, src.read_bytes(), 0o755))
    # the second layer masks the motd and refreshes os-release, so the
    # flattened tree must contain exactly one os-release and no motd
    update = [
        whiteout("etc/motd"),
        file_entry("etc/os-release", b"NAME=demo\nVERSION_ID=2\n"),
    ]
    return [base, update]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="write a two-layer demo image (OCI layout or "
                    "docker-save tar)")
    parser.add_argument("dest", help="output directory (oci) or tar path "
                                     "(docker-save)")
    parser.add_argument("--format", choices=("oci", "docker-save"),
                        default="oci")
    parser.add_argument("--name", default="demo/app:latest",
                        help="image reference recorded in the metadata")
    parser.add_argument("--binary", action="append", type=parse_binary,
                        default=[], metavar="DEST=SOURCE",
                        help="embed a host file at DEST inside the image, "
                             "mode 0755 (repeatable)")
    parser.add_argument("--no-compile", action="store_true",
                        help="skip compiling the built-in demo programs")
    args = parser.parse_args(argv)

    binaries = list(args.binary)
    scratch = None
    if not binaries and not args.no_compile:
        scratch = tempfile.mkdtemp(prefix="demo-tools-")
        for name, source in (("bin/echo", ECHO_SOURCE),
                             ("bin/ids", IDS_SOURCE)):
            out = Path(scratch) / Path(name).name
            if compile_static(source, out):
                binaries.append((name, out))
            else:
                print("gcc unavailable, the image will carry no "
                      "executables", file=sys.stderr)
                break

    layers = build_layers(binaries)
    dest = Path(args.dest)
    if args.format == "oci":
        write_oci_layout(dest, layers, image_name=args.name,
                         env=["DEMO_MARKER=1"], workdir="/")
    else:
        write_docker_save(dest, layers, repo_tag=args.name,
                          env=["DEMO_MARKER=1"], workdir="/")
    if scratch is not None:
        shutil.rmtree(scratch, ignore_errors=True)

    rootfs_name = sanitize_image_name(args.name)
    print(f"wrote {args.format} image {args.name!r} to {dest}")
    print("try:")
    print(f"  stowage flatten {dest} /tmp/app.tar.gz --env-out /tmp/app.env")
    print("  mkdir -p /tmp/nodes && stowage unpack /tmp/app.tar.gz /tmp/nodes")
    if binaries:
        print(f"  stowage run /tmp/nodes/{rootfs_name} -- "
              f"/bin/echo \"container hello world!\"")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
