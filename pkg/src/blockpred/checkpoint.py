"""Versioned checkpoint container shared by all trainable modules."""

from __future__ import annotations

import hashlib
import json

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config) -> str:
    """Stable hash of any json-serializable config mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, modules, config=None, extra=None):
    """modules: dict name -> nn.Module (or state dict)."""
    states = {name: (m.state_dict() if hasattr(m, "state_dict") else m)
              for name, m in modules.items()}
    payload = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash(config or {}),
        "config": config or {},
        "modules": states,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {FORMAT_VERSION})")
    return payload


def restore(payload, **modules):
    for name, module in modules.items():
        if name not in payload["modules"]:
            raise CheckpointError(f"checkpoint missing module state: {name}")
        module.load_state_dict(payload["modules"][name])
