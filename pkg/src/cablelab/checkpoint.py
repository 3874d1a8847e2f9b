"""JSON checkpoints for the dynamics models."""
from __future__ import annotations

import json
from pathlib import Path

from .baseline import MlpDynamics
from .gnn import GnnDynamics
from .neural import CHECKPOINT_VERSION

KINDS = {"gnn": GnnDynamics, "mlp": MlpDynamics}


class CheckpointError(ValueError):
    pass


def save_model(model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = {"format_version": CHECKPOINT_VERSION, **model.to_dict()}
    if extra:
        payload["extra"] = extra
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)
    return path


def load_model(path):
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    kind = payload.get("kind")
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    return KINDS[kind].from_dict(payload)
