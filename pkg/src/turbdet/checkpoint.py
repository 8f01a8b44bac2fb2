"""Checkpoint files: parameters, optimizer moments, schedule position and layer order."""
import hashlib
import json
import os
from pathlib import Path

import torch

FORMAT = "turbdet.checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


def combined_fingerprint(*parts):
    return hashlib.sha1("|".join(str(p) for p in parts).encode()).hexdigest()[:12]


def param_shapes(module):
    return {k: list(v.shape) for k, v in module.state_dict().items()}


def save_checkpoint(path, payload):
    """Atomically write ``payload`` (a dict) with format markers added."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(payload, format=FORMAT, version=VERSION)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(data, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_fingerprint=None, expect_layer_order=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        data = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(data, dict) or data.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if data.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data.get('version')}")
    if expect_fingerprint is not None and data.get("fingerprint") != expect_fingerprint:
        raise CheckpointError(f"{path}: config fingerprint {data.get('fingerprint')} does not match "
                              f"{expect_fingerprint}")
    if expect_layer_order is not None and data.get("layer_order") != list(expect_layer_order):
        raise CheckpointError(f"{path}: mitigator layer order differs from the current model "
                              f"({len(data.get('layer_order') or [])} vs {len(expect_layer_order)} layers)")
    return data


def load_state(module, state, name):
    """``load_state_dict`` with shape mismatches reported as :class:`CheckpointError`."""
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{name} parameters do not fit the model: {exc}") from exc


def describe(path):
    data = load_checkpoint(path)
    keep = ("fingerprint", "epoch", "schedule", "train_config")
    return json.dumps({k: data.get(k) for k in keep}, indent=2, default=str)
