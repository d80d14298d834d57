"""TieCD change detection: equivariant blocks, fusion gate and loss."""

from cad.changedetect.blocks import (
    TEDB,
    TESA,
    TEUB,
    GlobalSelfAttention,
    MultiHeadBlock,
    MultiScaleAttention,
    RefinementBlock,
    TemporalFusionGate,
    box_filter,
    swap,
)
from cad.changedetect.tiecd import ChangeMap, TieCD, TieCDConfig, cd_loss

__all__ = [
    "ChangeMap",
    "GlobalSelfAttention",
    "MultiHeadBlock",
    "MultiScaleAttention",
    "RefinementBlock",
    "TEDB",
    "TESA",
    "TEUB",
    "TemporalFusionGate",
    "TieCD",
    "TieCDConfig",
    "box_filter",
    "cd_loss",
    "swap",
]
