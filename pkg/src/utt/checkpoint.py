"""Checkpoints: one little-endian binary blob per directory plus a JSON manifest
of ``name -> (dtype, shape, offset)``.

Model weights live under their module path (``transformer.steps.0.ffn.fc1.weight``),
AdamW moments under ``optimizer.<param>.exp_avg`` / ``exp_avg_sq``. Float32 models
are stored as float32; float64 models keep float64 so a resumed run is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .training import TrainState

WEIGHTS = "weights.bin"
MANIFEST = "manifest.json"
STATE = "state.json"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _le(dtype):
    return np.dtype(dtype).newbyteorder("<")


def _pack(arrays: dict):
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name].astype(_le(arrays[name].dtype), copy=False))
        raw = arr.tobytes()
        entries[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def _unpack(entries, blob):
    out = {}
    for name, e in entries.items():
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"weights file truncated at {name!r}")
        out[name] = np.frombuffer(raw, dtype=_le(e["dtype"])).reshape(e["shape"]).copy()
    return out


def model_arrays(model: torch.nn.Module):
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def optimizer_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    arrays, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            arrays[f"optimizer.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"optimizer.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            steps[name] = float(st["step"])
    return arrays, steps


def save_checkpoint(path, model, optimizer=None, state: TrainState | None = None, config_tree=None):
    """Write ``path/{weights.bin, manifest.json, state.json}``; returns the content hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = model_arrays(model)
    steps = {}
    if optimizer is not None:
        opt_arrays, steps = optimizer_arrays(model, optimizer)
        arrays.update(opt_arrays)
    entries, blob = _pack(arrays)
    manifest = {"format": FORMAT_VERSION, "arrays": entries}
    state_doc = {
        "train_state": state.to_json() if state is not None else None,
        "optimizer_steps": steps,
        "optimizer_lr": optimizer.param_groups[0]["lr"] if optimizer is not None else None,
        "config": config_tree,
    }
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / STATE).write_text(json.dumps(state_doc, indent=1, sort_keys=True, default=_json_default))
    return checkpoint_hash(path)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_checkpoint(path):
    path = Path(path)
    for name in (WEIGHTS, MANIFEST, STATE):
        if not (path / name).exists():
            raise CheckpointError(f"checkpoint not found: expected {path / name}")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r} in {path}")
    arrays = _unpack(manifest["arrays"], (path / WEIGHTS).read_bytes())
    state_doc = json.loads((path / STATE).read_text())
    return arrays, state_doc


def load_checkpoint(path, model, optimizer=None):
    """Restore weights (and optimizer moments if given); returns the saved TrainState or None."""
    arrays, doc = read_checkpoint(path)
    own = model.state_dict()
    missing = [k for k in own if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks parameters {missing[:5]}")
    model.load_state_dict({k: torch.from_numpy(arrays[k]).to(own[k].dtype) for k in own})
    if optimizer is not None and doc["optimizer_steps"]:
        names = dict(model.named_parameters())
        for name, step in doc["optimizer_steps"].items():
            p = names[name]
            optimizer.state[p] = {
                "step": torch.tensor(step, dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays[f"optimizer.{name}.exp_avg"]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(arrays[f"optimizer.{name}.exp_avg_sq"]).to(p.dtype),
            }
        for group in optimizer.param_groups:
            group["lr"] = doc["optimizer_lr"]
    ts = doc.get("train_state")
    return TrainState(**ts) if ts is not None else None


def checkpoint_config(path):
    return read_checkpoint(path)[1].get("config")


def checkpoint_hash(path):
    """SHA-256 over the manifest, the weight bytes and the train state."""
    path = Path(path)
    h = hashlib.sha256()
    for name in (MANIFEST, WEIGHTS, STATE):
        h.update((path / name).read_bytes())
    return h.hexdigest()


def state_checksum(model, optimizer=None, state: TrainState | None = None):
    """In-memory checksum of everything a checkpoint would hold."""
    h = hashlib.sha256()
    arrays = model_arrays(model)
    if optimizer is not None:
        arrays.update(optimizer_arrays(model, optimizer)[0])
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    if state is not None:
        h.update(json.dumps(state.to_json(), sort_keys=True, default=_json_default).encode())
    return h.hexdigest()
