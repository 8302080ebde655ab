"""Tool-wide settings resolved as flag > environment > file > default.

The config file is plain ``key=value`` text (# comments, blank lines
allowed) so it can be written and audited on a machine with no tooling.
Every key is also reachable through an environment variable with the
``STOWAGE_`` prefix.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .errors import StowageError
from .runtime import ENV_POLICIES

ENV_PREFIX = "STOWAGE_"

FILE_KEYS = ("site_bind_dirs", "env_policy", "verbosity")


@dataclass
class GlobalConfig:
    site_bind_dirs: list[str] = field(default_factory=list)
    default_env_policy: str = "inherit-host"
    verbosity: int = 0
    config_file_path: Path | None = None


def _parse_bind_dirs(raw: str) -> list[str]:
    dirs = [d for d in raw.split(":") if d]
    for d in dirs:
        if not d.startswith("/"):
            raise StowageError(
                f"site bind directories must be absolute paths, got {d!r}"
            )
    return dirs


def _parse_policy(raw: str) -> str:
    if raw not in ENV_POLICIES:
        raise StowageError(
            f"unknown env policy {raw!r}; choose one of {', '.join(ENV_POLICIES)}"
        )
    return raw


def _parse_verbosity(raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise StowageError(f"verbosity must be an integer, got {raw!r}") from exc


# key -> (env var suffix, parser); file keys use the same parsers.
_PARSERS: dict[str, Callable[[str], object]] = {
    "site_bind_dirs": _parse_bind_dirs,
    "env_policy": _parse_policy,
    "verbosity": _parse_verbosity,
}


def read_config_file(path: str | Path) -> dict[str, object]:
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StowageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in _PARSERS:
            raise StowageError(
                f"{path}:{lineno}: expected one of "
                f"{', '.join(FILE_KEYS)} as 'key=value', got {line!r}"
            )
        values[key] = _PARSERS[key](value)
    return values


def load_config(flag_bind_dirs: list[str] | None = None,
                flag_env_policy: str | None = None,
                flag_verbosity: int | None = None,
                config_file: str | Path | None = None,
                env: Mapping[str, str] | None = None) -> GlobalConfig:
    """Resolve every setting through the precedence chain."""
    env = os.environ if env is None else env
    from_file = read_config_file(config_file) if config_file else {}

    def resolve(key: str, flag: object | None, default: object) -> object:
        if flag is not None:
            return flag
        env_raw = env.get(ENV_PREFIX + key.upper())
        if env_raw is not None:
            return _PARSERS[key](env_raw)
        if key in from_file:
            return from_file[key]
        return default

    bind_dirs = list(resolve("site_bind_dirs", flag_bind_dirs, []))
    for d in bind_dirs:
        if not d.startswith("/"):
            raise StowageError(
                f"site bind directories must be absolute paths, got {d!r}"
            )
    return GlobalConfig(
        site_bind_dirs=bind_dirs,
        default_env_policy=_parse_policy(
            str(resolve("env_policy", flag_env_policy, "inherit-host"))),
        verbosity=int(resolve("verbosity", flag_verbosity, 0)),
        config_file_path=Path(config_file) if config_file else None,
    )
