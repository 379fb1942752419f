"""Checkpoint directories: a ``manifest`` of ``key = value`` lines plus one
DSUT file per tensor (``<name>.dsut``)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor

FORMAT_VERSION = "1"


def save_checkpoint(directory: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version = {FORMAT_VERSION}"]
    lines += [f"{k} = {v}" for k, v in manifest.items()]
    lines.append("tensors = " + ",".join(tensors))
    for name, value in tensors.items():
        save_tensor(directory / f"{name}.dsut", value)
    (directory / "manifest").write_text("\n".join(lines) + "\n")


def read_manifest(directory: str | Path) -> dict[str, str]:
    path = Path(directory) / "manifest"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    if out.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{directory}: unsupported checkpoint version {out.get('format_version')}")
    return out


def load_checkpoint(directory: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    manifest = read_manifest(directory)
    names = [n for n in manifest.get("tensors", "").split(",") if n]
    tensors = {n: load_tensor(Path(directory) / f"{n}.dsut") for n in names}
    return manifest, tensors
