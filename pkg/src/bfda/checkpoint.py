"""Versioned checkpoint archives: config echo plus named module state dicts."""
from __future__ import annotations

import os
from typing import Optional

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, modules: dict, config: dict, epoch: int = 0, extra: Optional[dict] = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "epoch": int(epoch),
        "modules": {name: {k: v.detach().cpu().clone() for k, v in m.state_dict().items()}
                    for name, m in modules.items() if m is not None},
        "extra": extra or {},
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{FORMAT_VERSION} checkpoint")
    return payload


def restore(module: torch.nn.Module, payload: dict, name: str) -> None:
    try:
        module.load_state_dict(payload["modules"][name])
    except KeyError:
        raise CheckpointError(f"checkpoint has no '{name}' parameters") from None
