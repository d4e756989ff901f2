"""Checkpoints: a flat map of parameter paths to arrays plus a JSON header, in one ``.npz``."""

from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SCHEMA_VERSION = 1
_HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, header: dict) -> None:
    """Write atomically; arrays are stored under their canonical path strings."""
    path = Path(path)
    header = {"schema_version": SCHEMA_VERSION, **header}
    arrays = {k: np.ascontiguousarray(v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v) for k, v in tensors.items()}
    if _HEADER_KEY in arrays:
        raise CheckpointError(f"reserved key {_HEADER_KEY}")
    arrays[_HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {name: ndarray})``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if _HEADER_KEY not in arrays:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(arrays.pop(_HEADER_KEY).tobytes().decode())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema {header.get('schema_version')}")
    return header, arrays


def module_tensors(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_into(module: nn.Module, arrays: dict, prefix: str = "", strict: bool = True) -> None:
    """Copy ``prefix``-ed arrays into ``module``; shape or key mismatches raise :class:`CheckpointError`."""
    state = module.state_dict()
    sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(sub))
    unexpected = sorted(set(sub) - set(state))
    if strict and (missing or unexpected):
        raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    new_state = {}
    for k, ref in state.items():
        if k not in sub:
            new_state[k] = ref
            continue
        arr = torch.as_tensor(sub[k])
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{prefix}{k}: shape {tuple(arr.shape)} != {tuple(ref.shape)}")
        new_state[k] = arr.to(ref.dtype)
    module.load_state_dict(new_state)


def denoiser_header(config) -> dict:
    return {"config_name": config.name, "layers": config.layers, "hidden": config.hidden, "heads": config.heads}
