"""Checkpoints: an opaque torch weight blob plus a plain-text manifest
(schema version, iteration, schedule parameters, decoder block widths,
config hash). Loading verifies the config hash unless explicitly overridden.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .exceptions import CheckpointError

SCHEMA_VERSION = 1


def state_dict_sha(state_dict: dict) -> str:
    """Stable content hash of a state dict (sorted keys, raw tensor bytes)."""
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        digest.update(key.encode())
        tensor = state_dict[key]
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def save_checkpoint(path, states: dict, *, iteration: int, T: int,
                    beta_start: float, beta_end: float, block_widths,
                    config_hash: str, extra: dict | None = None):
    """states maps component name -> state_dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(states, path)
    lines = [
        f"schema_version = {SCHEMA_VERSION}",
        f"iteration = {iteration}",
        f"T = {T}",
        f"beta_start = {beta_start}",
        f"beta_end = {beta_end}",
        f"block_widths = {', '.join(str(w) for w in block_widths)}",
        f"config_hash = {config_hash}",
        f"components = {', '.join(sorted(states))}",
    ]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {value}")
    manifest_path(path).write_text("".join(f"{ln}\n" for ln in lines))
    return path


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"missing manifest {mpath}")
    out = {}
    for line in mpath.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path, expected_config_hash: str | None = None,
                    allow_hash_mismatch: bool = False):
    """Returns (states, manifest). Fails loudly on a config hash mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    manifest = read_manifest(path)
    if int(manifest.get("schema_version", -1)) != SCHEMA_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema {manifest.get('schema_version')}"
        )
    if expected_config_hash is not None and not allow_hash_mismatch:
        found = manifest.get("config_hash", "")
        if found != expected_config_hash:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {found}, current "
                f"{expected_config_hash} (pass allow_hash_mismatch to override)"
            )
    try:
        states = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    return states, manifest
