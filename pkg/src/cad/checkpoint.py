"""Checkpoint container.

A checkpoint is a ``torch.save`` dictionary::

    format      "cad-checkpoint"
    version     1
    stage       name of the stage that wrote it
    modules     {"codec" | "registration" | "cd": state_dict}
    model       model configuration echo (plain dict)
    config      stage configuration echo (plain dict)
    lineage     list of {"stage", "path"} for every ancestor, oldest first
    rng         {"torch": ByteTensor, "numpy": bit-generator state}
    metrics     final / best validation metrics
    history     per-epoch log rows
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from cad.errors import MissingCheckpointError

FORMAT = "cad-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    modules: dict
    model: dict
    config: dict = field(default_factory=dict)
    lineage: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "stage": self.stage,
            "modules": self.modules,
            "model": self.model,
            "config": self.config,
            "lineage": self.lineage,
            "rng": self.rng,
            "metrics": self.metrics,
            "history": self.history,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt.to_dict(), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    raw = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(raw, dict) or raw.get("format") != FORMAT:
        raise MissingCheckpointError(f"{path} is not a {FORMAT} file")
    return Checkpoint(
        stage=raw["stage"],
        modules=raw["modules"],
        model=raw["model"],
        config=raw.get("config", {}),
        lineage=raw.get("lineage", []),
        rng=raw.get("rng", {}),
        metrics=raw.get("metrics", {}),
        history=raw.get("history", []),
    )
