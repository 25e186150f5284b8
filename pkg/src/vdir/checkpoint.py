"""Single-file checkpoint archive.

Layout (safetensors): an 8-byte little-endian header length, a JSON header
indexing every named tensor (dtype, shape, byte offsets) plus a string map
of metadata, then the raw row-major little-endian tensor bytes. Weights are
float32. The metadata carries the network config, format version, training
config fingerprint, iteration and RNG state.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open

from .networks import VDID, NetworkConfig

FORMAT_VERSION = "vdir-ckpt/1"


class CheckpointError(RuntimeError):
    pass


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _optimizer_tensors(prefix, opt):
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            tensors[f"{prefix}.state.{idx}.{key}"] = t.detach().contiguous()
    return tensors, sd["param_groups"]


def _restore_optimizer(prefix, opt, tensors, groups):
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + ".state."):
            continue
        idx, key = name[len(prefix) + 7:].split(".", 1)
        state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, model: VDID, *, optimizers: dict | None = None, iteration: int = 0,
                    train_config: dict | None = None, rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in model.state_dict().items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "network_config": json.dumps(model.cfg.to_dict()),
        "network_fingerprint": fingerprint(model.cfg.to_dict()),
        "iteration": str(iteration),
    }
    if train_config is not None:
        meta["train_config"] = json.dumps(train_config)
        meta["config_fingerprint"] = fingerprint(train_config)
    groups = {}
    for name, opt in (optimizers or {}).items():
        t, g = _optimizer_tensors(f"optim.{name}", opt)
        tensors.update(t)
        groups[name] = g
    meta["optimizer_groups"] = json.dumps(groups)
    if rng_state:
        if "torch" in rng_state:
            tensors["rng.torch"] = rng_state["torch"]
        meta["numpy_rng"] = json.dumps(rng_state.get("numpy"))
    save_file(tensors, str(path), metadata=meta)
    return path


def read_header(path) -> dict:
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format_version')!r}")
    return meta


def load_model(path, strict_disc_shape: bool = True) -> tuple[VDID, dict]:
    """Rebuild the networks from a checkpoint, verifying header against weights."""
    meta = read_header(path)
    cfg_dict = json.loads(meta["network_config"])
    if fingerprint(cfg_dict) != meta.get("network_fingerprint"):
        raise CheckpointError(f"{path}: network config fingerprint mismatch")
    model = VDID(NetworkConfig(**cfg_dict), strict_disc_shape=strict_disc_shape)
    tensors = load_file(str(path))
    weights = {k: v for k, v in tensors.items() if not k.startswith(("optim.", "rng."))}
    try:
        model.load_state_dict(weights, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the header config: {exc}") from exc
    return model, meta


def load_training_state(path, optimizers: dict) -> dict:
    """Restore optimizer moments in place; return iteration and RNG state."""
    meta = read_header(path)
    tensors = load_file(str(path))
    groups = json.loads(meta.get("optimizer_groups", "{}"))
    for name, opt in optimizers.items():
        if name in groups:
            _restore_optimizer(f"optim.{name}", opt, tensors, groups[name])
    numpy_rng = meta.get("numpy_rng")
    return {
        "iteration": int(meta.get("iteration", 0)),
        "config_fingerprint": meta.get("config_fingerprint"),
        "torch_rng": tensors.get("rng.torch"),
        "numpy_rng": json.loads(numpy_rng) if numpy_rng else None,
    }
