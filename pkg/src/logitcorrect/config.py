"""Flat key=value configuration files and run manifests."""
from __future__ import annotations

import dataclasses
import json
import platform
from pathlib import Path

import numpy as np

from .storage import atomic_write, sha256_file


def read_flat_config(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_flat_config(path, values: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in sorted(values.items()))
    atomic_write(path, text.encode("utf-8"))


def coerce(value: str, like):
    """Convert a config string to the type of a dataclass default."""
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return None if value.lower() in ("", "none") else float(value)
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(int(v) if v.lstrip("-").isdigit() else v for v in items)
    return value


def apply_flat(cfg, values: dict, prefix: str = ""):
    """Return a copy of dataclass ``cfg`` with matching keys overridden.

    Keys may carry ``prefix`` (e.g. "defender.lr") or be bare.
    """
    updates = {}
    for f in dataclasses.fields(cfg):
        for key in (prefix + f.name, f.name) if prefix else (f.name,):
            if key in values and values[key] is not None:
                v = values[key]
                updates[f.name] = coerce(v, getattr(cfg, f.name)) if isinstance(v, str) else v
                break
    return dataclasses.replace(cfg, **updates)


def flat(cfg, prefix: str = "") -> dict:
    return {prefix + k: ("" if v is None else ",".join(map(str, v)) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(cfg).items()}


def write_manifest(out_dir, *, command: str, config: dict, seed: int, inputs: dict,
                   outputs: list, wall_time: float) -> Path:
    """Record everything needed to re-run a CLI command beside its outputs."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": {k: config[k] for k in sorted(config)},
        "seed": seed,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "wall_time_s": round(wall_time, 3),
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    path = out_dir / "manifest.json"
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=False) + "\n").encode("utf-8"))
    return path
