"""TieCD: temporally-invariant, efficient change detection U-Net."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from cad.changedetect.blocks import (
    TEDB,
    TEUB,
    GlobalSelfAttention,
    MultiHeadBlock,
    MultiScaleAttention,
    RefinementBlock,
    TemporalFusionGate,
    stack,
    unstack,
)
from cad.errors import ShapeMismatchError

CD_EPS = 1e-7


@dataclass
class TieCDConfig:
    in_channels: int = 32          # tap width F in feature space
    base_width: int = 32
    depth: int = 3
    size_variant: str = "L"        # "S" halves every width
    input_space: str = "feature"   # or "pixel"
    image_channels: int = 3
    heads: int = 4

    @property
    def widths(self) -> list[int]:
        w = [self.base_width * 2 ** i for i in range(self.depth)]
        if self.size_variant == "S":
            w = [max(1, x // 2) for x in w]
        elif self.size_variant != "L":
            raise ValueError(f"size_variant must be 'S' or 'L', got {self.size_variant!r}")
        return w


@dataclass
class ChangeMap:
    prob: torch.Tensor
    threshold: float = 0.5

    @property
    def mask(self) -> torch.Tensor:
        return self.prob >= self.threshold


class PixelStem(nn.Module):
    """Two layers lifting C x H x W pixels to F x H/2 x W/2 (pixel-space pretraining only)."""

    def __init__(self, image_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(image_channels, out_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.mish(self.conv1(x)))


class TieCD(nn.Module):
    """Change detector whose output is exactly invariant to swapping its inputs.

    Inputs are feature maps at half image resolution (or full-resolution
    pixels when ``input_space == "pixel"``, via a two-layer stem); the output
    is a per-pixel change logit at twice the feature resolution.
    """

    def __init__(self, config: TieCDConfig | None = None):
        super().__init__()
        self.config = c = config or TieCDConfig()
        widths = c.widths
        self.stem = PixelStem(c.image_channels, c.in_channels) if c.input_space == "pixel" else None
        chans = [c.in_channels] + widths
        self.down = nn.ModuleList(TEDB(a, b) for a, b in zip(chans, chans[1:]))
        bottom = widths[-1]
        self.global_attention = GlobalSelfAttention(bottom)
        self.multiscale_attention = MultiScaleAttention(bottom)
        self.multihead = MultiHeadBlock(bottom, heads=c.heads)
        up = []
        cur = bottom
        for i in reversed(range(c.depth)):
            out = widths[max(i - 1, 0)]
            up.append(TEUB(cur, widths[i], out))
            cur = out
        self.up = nn.ModuleList(up)
        self.refine = RefinementBlock(cur)
        self.fusion = TemporalFusionGate(cur)
        self.head = nn.Conv2d(cur, 1, 1)

    def attach_stem(self) -> None:
        c = self.config
        self.stem = PixelStem(c.image_channels, c.in_channels)
        c.input_space = "pixel"

    def detach_stem(self) -> None:
        self.stem = None
        self.config.input_space = "feature"

    def streams(self, f1, f2):
        """Refined per-time features just before fusion (equivariant under swap)."""
        if f1.shape != f2.shape:
            raise ShapeMismatchError(f"inputs differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        if self.stem is not None:
            f1, f2 = unstack(self.stem(stack((f1, f2))))
        pair = (f1, f2)
        skips = []
        for block in self.down:
            pair, skip = block(pair)
            skips.append(skip)
        x = stack(pair)
        x = self.global_attention(x)
        x = self.multiscale_attention(x)
        x = self.multihead(x)
        pair = unstack(x)
        for block, skip in zip(self.up, reversed(skips)):
            pair = block(pair, skip)
        return unstack(self.refine(stack(pair)))

    def forward(self, f1, f2) -> torch.Tensor:
        """Change logits at the input image resolution, shape (N,1,2A,2B)."""
        r1, r2 = self.streams(f1, f2)
        logits = self.head(self.fusion(r1, r2))
        return F.interpolate(logits, scale_factor=2, mode="bilinear", align_corners=False)

    def detect(self, f1, f2, threshold: float = 0.5) -> ChangeMap:
        return ChangeMap(torch.sigmoid(self(f1, f2))[:, 0], threshold)


def cd_loss(prob: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None,
            eps: float = CD_EPS) -> torch.Tensor:
    """Mean binary cross-entropy; ``mask`` restricts the mean to valid pixels."""
    if isinstance(prob, ChangeMap):
        prob = prob.prob
    if prob.shape != gt.shape:
        raise ShapeMismatchError(f"{tuple(prob.shape)} vs {tuple(gt.shape)}")
    p = prob.clamp(eps, 1 - eps)
    y = gt.to(p.dtype)
    bce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    if mask is None:
        return bce.mean()
    m = mask.to(p.dtype)
    return (bce * m).sum() / m.sum().clamp_min(1.0)

