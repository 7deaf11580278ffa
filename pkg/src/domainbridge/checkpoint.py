"""Versioned checkpoint files.

A checkpoint is a ``torch.save`` dictionary with a format version, a kind
tag (``"translator"``, ``"segmentation"``, ``"train_state"``), the model
descriptor needed to rebuild the network, and the tensors themselves.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, kind: str, spec: dict, state: dict[str, Any],
                    **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"format_version": FORMAT_VERSION, "kind": kind, "spec": spec, "state": state, **extra}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, kind: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if blob["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {blob['format_version']} != supported {FORMAT_VERSION}")
    if kind is not None and blob.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob
