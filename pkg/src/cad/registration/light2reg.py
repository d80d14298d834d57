"""Light2Reg: coarse-to-fine cascade of lightweight homography regressors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from cad.errors import ShapeMismatchError
from cad.registration.homography import (
    compose,
    offsets_to_homography,
    rescale_homography,
    warp,
)


@dataclass
class LevelConfig:
    input_scale: float
    channel_width: int
    num_encoder_blocks: int = 3
    use_avg_pool: bool = False


def _default_levels() -> list[LevelConfig]:
    return [
        LevelConfig(0.25, 16, 3, use_avg_pool=True),
        LevelConfig(0.5, 32, 3),
        LevelConfig(1.0, 48, 3),
    ]


@dataclass
class RegressorConfig:
    levels: list[LevelConfig] = field(default_factory=_default_levels)
    image_channels: int = 3
    feature_channels: int = 32

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, LevelConfig) else LevelConfig(**lv) for lv in self.levels]
        if len(self.levels) != 3:
            raise ValueError("Light2Reg needs exactly three levels")
        scales = [lv.input_scale for lv in self.levels]
        if scales != [0.25, 0.5, 1.0]:
            raise ValueError(f"levels must be at scales 1/4, 1/2, 1 in order, got {scales}")
        widths = [lv.channel_width for lv in self.levels]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError("channel widths must be non-decreasing across levels")


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None]


class EncoderBlock(nn.Module):
    """Depthwise-separable conv, one 1x1 conv, BN, Mish and SE gating.

    The depthwise 3x3 carries stride 2, so each block halves the grid.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, stride=stride, padding=1,
                                   groups=in_channels, bias=False)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.project = nn.Conv2d(out_channels, out_channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.se = SqueezeExcite(out_channels)

    def forward(self, x):
        x = self.project(self.pointwise(self.depthwise(x)))
        return self.se(F.mish(self.norm(x)))


class HomographyRegressor(nn.Module):
    """Regress a pixel-frame homography aligning ``b`` onto ``a``.

    Offsets are ``f(a, b) - f(b, a)`` with both orders in one batch, so
    identical inputs give zero offsets (the identity, up to rounding) in
    train and eval mode alike.  The head is zero-initialised, so an untrained
    regressor returns the identity too.
    """

    def __init__(self, in_channels: int, level: LevelConfig):
        super().__init__()
        width = level.channel_width
        self.pool = nn.AvgPool2d(2) if level.use_avg_pool else nn.Identity()
        self.stem = nn.Sequential(
            nn.Conv2d(2 * in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.Mish(),
        )
        self.blocks = nn.Sequential(*[EncoderBlock(width, width) for _ in range(level.num_encoder_blocks)])
        self.head = nn.Linear(width, 8, bias=False)  # a bias would cancel in the difference
        nn.init.zeros_(self.head.weight)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"regressor inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        h, w = a.shape[-2:]
        n = a.shape[0]
        both = torch.cat([torch.cat([a, b], dim=1), torch.cat([b, a], dim=1)])
        x = self.blocks(self.stem(self.pool(both)))
        out = self.head(x.mean(dim=(2, 3)))
        return offsets_to_homography(out[:n] - out[n:], h, w)


class PixelStem(nn.Module):
    """Two layers mapping a C x H x W image to F x H/2 x W/2 pseudo-features."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.mish(self.conv1(x)))


def downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x if factor == 1 else F.avg_pool2d(x, factor)


class Light2Reg(nn.Module):
    """Three-level registration cascade.

    Level 1 sees the reconstructed images at 1/4 resolution.  Levels 2 and 3
    see feature streams at half image resolution (codec taps, or in pixel
    mode the output of a small stem), downsampled x2 for level 2.
    """

    def __init__(self, config: RegressorConfig | None = None):
        super().__init__()
        self.config = config or RegressorConfig()
        c = self.config
        self.level1 = HomographyRegressor(c.image_channels, c.levels[0])
        self.level2 = HomographyRegressor(c.feature_channels, c.levels[1])
        self.level3 = HomographyRegressor(c.feature_channels, c.levels[2])
        self.pixel_stem = PixelStem(c.image_channels, c.feature_channels)

    def forward(self, x1_hat, x2_hat, z1_hat=None, z2_hat=None) -> dict:
        """Register ``x2_hat`` onto ``x1_hat``.

        Returns a dict with ``H`` (full-resolution pixel homography), ``w2``
        (``z2_hat`` warped onto ``z1_hat``'s grid), ``w2_mask``, the
        per-level homographies and the cumulative homographies expressed on
        the 1/4, 1/2 and full image grids.
        """
        if x1_hat.shape != x2_hat.shape:
            raise ShapeMismatchError("image pair shapes differ")
        if z1_hat is None:
            z1_hat, z2_hat = self.pixel_stem(x1_hat), self.pixel_stem(x2_hat)
        if z1_hat.shape != z2_hat.shape:
            raise ShapeMismatchError("feature pair shapes differ")
        img_h, img_w = x1_hat.shape[-2:]
        if tuple(z1_hat.shape[-2:]) != (img_h // 2, img_w // 2):
            raise ShapeMismatchError(
                f"feature maps must be half the image size, got {tuple(z1_hat.shape[-2:])}")

        # (i) quarter-resolution images
        H_quarter = self.level1(downsample(x1_hat, 4), downsample(x2_hat, 4))
        A = rescale_homography(H_quarter, 2.0)  # on the feature (H/2) grid

        # (ii) warp features, regress at H/4 against equally downsampled reference
        wa = warp(z2_hat, A)
        H_half = self.level2(downsample(z1_hat, 2), downsample(wa, 2))
        half = compose(rescale_homography(H_half, 2.0), A)

        # (iii) feature resolution
        wb = warp(z2_hat, half)
        H_full = self.level3(z1_hat, wb)
        total = compose(H_full, half)

        w2, w2_mask = warp(z2_hat, total, return_mask=True)
        return {
            "H": rescale_homography(total, 2.0),
            "w2": w2,
            "w2_mask": w2_mask,
            "H_quarter": H_quarter,
            "H_half": H_half,
            "H_full": H_full,
            # cumulative transforms on the image grid at scales 1/4, 1/2 and 1
            "H_scale": {
                0.25: H_quarter,
                0.5: half,
                1.0: rescale_homography(total, 2.0),
            },
            "warped_features": [wa, wb, w2],
        }


def registration_pyramids(x1: torch.Tensor, x2: torch.Tensor, H_scale: dict) -> tuple[dict, dict, dict]:
    """Reference pyramid of ``x1`` and warped pyramid of ``x2`` at scales 1, 1/2, 1/4.

    Returns ``(ref, warped, masks)`` dicts keyed by scale.
    """
    ref, warped, masks = {}, {}, {}
    for s, factor in ((1.0, 1), (0.5, 2), (0.25, 4)):
        ref[s] = downsample(x1, factor)
        warped[s], masks[s] = warp(downsample(x2, factor), H_scale[s], return_mask=True)
    return ref, warped, masks


def masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype).expand_as(sq)
    denom = m.sum()
    if denom == 0:
        return sq.sum() * 0.0
    return (sq * m).sum() / denom


def registration_loss(ref_pyramid: dict, warped_pyramid: dict, alphas=(0.5, 0.3, 0.2),
                      masks: dict | None = None) -> torch.Tensor:
    """Weighted masked MSE over the scales 1, 1/2 and 1/4 (weights in that order)."""
    if any(a < 0 for a in alphas):
        raise ValueError("alphas must be non-negative")
    total = 0.0
    for alpha, s in zip(alphas, (1.0, 0.5, 0.25)):
        m = masks.get(s) if masks else None
        total = total + alpha * masked_mse(ref_pyramid[s], warped_pyramid[s], m)
    return total
