"""Flat key=value run configuration files and run-directory manifests.

Config files hold one `key = value` pair per line; `#` starts a comment.
Command-line flags override file values, which override built-in defaults.
"""

from __future__ import annotations

import json
import subprocess
from pathlib import Path

from .errors import ParameterError


def parse_config_file(path: Path | str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve(file_values: dict[str, str], overrides: dict, key: str, default, cast=None):
    """Precedence: explicit flag > config file > default."""
    if key in overrides and overrides[key] is not None:
        return overrides[key]
    if key in file_values:
        raw = file_values[key]
        caster = cast if cast is not None else type(default)
        if caster is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        try:
            return caster(raw)
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return default


def write_config_snapshot(run_dir: Path, resolved: dict) -> None:
    lines = [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    (run_dir / "config.snapshot").write_text("\n".join(lines) + "\n")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(run_dir: Path, command: str, resolved: dict, wall_times: dict) -> None:
    manifest = {
        "command": command,
        "config": {k: resolved[k] for k in sorted(resolved)},
        "git_describe": git_describe(),
        "wall_times_s": wall_times,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
