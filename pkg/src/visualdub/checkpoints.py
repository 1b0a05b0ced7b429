"""Checkpoint containers: named parameter arrays, optimizer state, RNG state
and a config snapshot in one npz with a format version.

Keeping optimizer moments and the numpy RNG state inside the file is what
makes resume(+N epochs) bit-identical to a single longer run in
fixed-precision mode.
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .errors import DataError

CHECKPOINT_FORMAT_VERSION = 1


def _optimizer_arrays(optimizer):
    """Flatten Adam state into named arrays aligned with param order."""
    arrays = {}
    scalars = {}
    state = optimizer.state_dict()["state"]
    for pid, entry in state.items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                arrays[f"opt/{pid}/{key}"] = value.detach().cpu().numpy()
            else:
                scalars[f"{pid}/{key}"] = float(value)
    return arrays, scalars


def save_checkpoint(path, module: torch.nn.Module, config: dict, *, stage: str,
                    epoch: int = 0, optimizer=None, rng: np.random.Generator = None,
                    extra: dict = None):
    arrays = {f"param/{name}": tensor.detach().cpu().numpy()
              for name, tensor in module.state_dict().items()}
    meta = {
        "stage": stage,
        "epoch": int(epoch),
        "config": dict(config),
        "extra": dict(extra or {}),
        "opt_scalars": {},
        "rng_state": None,
    }
    if optimizer is not None:
        opt_arrays, opt_scalars = _optimizer_arrays(optimizer)
        arrays.update(opt_arrays)
        meta["opt_scalars"] = opt_scalars
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    np.savez(path,
             format_version=np.int64(CHECKPOINT_FORMAT_VERSION),
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path):
    """Returns (meta dict, {param_name: array}, {opt_key: array})."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "format_version" not in data or "meta" not in data:
        raise DataError(f"checkpoint {path} lacks format_version/meta")
    if int(data["format_version"]) != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported format_version "
                        f"{int(data['format_version'])}")
    meta = json.loads(bytes(data["meta"]).decode())
    params = {}
    opt_arrays = {}
    for key in data.files:
        if key.startswith("param/"):
            params[key[len("param/"):]] = data[key]
        elif key.startswith("opt/"):
            opt_arrays[key[len("opt/"):]] = data[key]
    return meta, params, opt_arrays


def restore_module(module: torch.nn.Module, params: dict):
    dtype = next(module.parameters()).dtype
    state = {}
    for name, tensor in module.state_dict().items():
        if name not in params:
            raise DataError(f"checkpoint is missing parameter {name}")
        arr = torch.as_tensor(params[name])
        state[name] = arr.to(dtype) if arr.is_floating_point() else arr
    module.load_state_dict(state)


def restore_optimizer(optimizer, opt_arrays: dict, opt_scalars: dict):
    """Rebuild Adam state in-place (after a dummy state_dict is shaped)."""
    state_dict = optimizer.state_dict()
    state = {}
    for key, arr in opt_arrays.items():
        pid_s, field = key.split("/", 1)
        entry = state.setdefault(int(pid_s), {})
        entry[field] = torch.as_tensor(arr.copy())
    for key, value in opt_scalars.items():
        pid_s, field = key.split("/", 1)
        entry = state.setdefault(int(pid_s), {})
        entry[field] = value
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)


def rng_from_state(state):
    rng = np.random.default_rng(0)
    if state is not None:
        rng.bit_generator.state = state
    return rng
