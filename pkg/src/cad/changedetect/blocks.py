"""Permutation-equivariant building blocks of TieCD.

A temporal pair is carried as a tuple ``(f1, f2)`` of (N,F,A,B) tensors.
Per-stream operations run once on the two streams stacked along the batch
axis, so both times share weights and see identical arithmetic.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from cad.errors import ShapeMismatchError


def stack(pair):
    f1, f2 = pair
    if f1.shape != f2.shape:
        raise ShapeMismatchError(f"temporal streams differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    return torch.cat([f1, f2], dim=0)


def unstack(x):
    f1, f2 = x.chunk(2, dim=0)
    return f1, f2


def swap(pair):
    return pair[1], pair[0]


class TESA(nn.Module):
    """Temporally-equivariant self-attention over the length-2 time sequence.

    Query and key are shared 1x1 convolutions followed by spatial averaging
    (one F-vector per time); values are a shared 1x1 convolution flattened to
    F*A*B.  The 2x2 attention mixes the two value streams and the result is
    added to the inputs.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    def attention(self, pair):
        x = stack(pair)
        q1, q2 = unstack(self.query(x).mean(dim=(2, 3)))
        k1, k2 = unstack(self.key(x).mean(dim=(2, 3)))
        scale = 1.0 / math.sqrt(self.channels)
        s11, s12 = (q1 * k1).sum(1) * scale, (q1 * k2).sum(1) * scale
        s21, s22 = (q2 * k1).sum(1) * scale, (q2 * k2).sum(1) * scale
        row1 = torch.softmax(torch.stack([s11, s12], dim=1), dim=1)
        row2 = torch.softmax(torch.stack([s21, s22], dim=1), dim=1)
        return torch.stack([row1, row2], dim=1)  # (N, 2, 2)

    def forward(self, pair):
        att = self.attention(pair)
        v1, v2 = unstack(self.value(stack(pair)))
        a = att[:, :, :, None, None, None]
        # Two-term sums written out so swapping streams is exact.
        z1 = a[:, 0, 0] * v1 + a[:, 0, 1] * v2
        z2 = a[:, 1, 0] * v1 + a[:, 1, 1] * v2
        return pair[0] + z1, pair[1] + z2


class ConvBNMish(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.Mish(),
        )


class TEDB(nn.Module):
    """Temporally-equivariant downsample block.

    Returns ``(down_pair, skip_pair)``: the skip holds the full-resolution
    features before the stride-2 step.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.convs = nn.Sequential(ConvBNMish(in_channels, out_channels), ConvBNMish(out_channels, out_channels))
        self.down = ConvBNMish(out_channels, out_channels, 3, stride=2)
        self.tesa = TESA(out_channels)

    def forward(self, pair):
        x = self.convs(stack(pair))
        skip = unstack(x)
        return self.tesa(unstack(self.down(x))), skip


class TEUB(nn.Module):
    """Temporally-equivariant upsample block with same-time skip concatenation."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.convs = nn.Sequential(
            ConvBNMish(in_channels + skip_channels, out_channels),
            ConvBNMish(out_channels, out_channels),
        )
        self.tesa = TESA(out_channels)

    def forward(self, pair, skip_pair):
        x = F.interpolate(stack(pair), scale_factor=2, mode="bilinear", align_corners=False)
        s = stack(skip_pair)
        if s.shape[-2:] != x.shape[-2:]:
            raise ShapeMismatchError(f"skip {tuple(s.shape[-2:])} does not match upsampled {tuple(x.shape[-2:])}")
        x = self.convs(torch.cat([x, s], dim=1))
        return self.tesa(unstack(x))


class SeparableConv(nn.Sequential):
    def __init__(self, channels: int, k: int = 3):
        super().__init__(
            nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
        )


class GlobalSelfAttention(nn.Module):
    """Spatial self-attention with F/8-wide keys and queries, then a residual refinement."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = max(1, channels // 8)
        self.query = nn.Conv2d(channels, self.proj, 1)
        self.key = nn.Conv2d(channels, self.proj, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.refine = nn.Sequential(SeparableConv(channels), nn.BatchNorm2d(channels), nn.Mish())

    def attend(self, x):
        """Returns ``(o, A)`` with ``o`` (N,F,A,B) and attention ``A`` (N,AB,AB)."""
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2).transpose(1, 2)
        v = self.value(x).flatten(2).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.proj), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(n, c, h, w)
        return o, att

    def forward(self, x):
        o, _ = self.attend(x)
        return x + self.refine(o)


def box_filter(x: torch.Tensor, size: int) -> torch.Tensor:
    """Undecimated (stride 1) size x size mean filter with edge replication."""
    if size == 1:
        return x
    before = (size - 1) // 2
    after = size - 1 - before
    xp = F.pad(x, (before, after, before, after), mode="replicate")
    return F.avg_pool2d(xp, size, stride=1)


class MultiScaleAttention(nn.Module):
    """Shared global self-attention at box-filter scales 1, 2 and 4, fused to F channels."""

    def __init__(self, channels: int, scales=(1, 2, 4)):
        super().__init__()
        self.scales = scales
        self.attention = GlobalSelfAttention(channels)
        self.fuse = ConvBNMish(len(scales) * channels, channels, k=1)

    def forward(self, x):
        branches = [self.attention(box_filter(x, s)) for s in self.scales]
        return self.fuse(torch.cat(branches, dim=1))


class MultiHeadBlock(nn.Module):
    """Pre-norm transformer block over the A*B spatial tokens."""

    def __init__(self, channels: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        while channels % heads:
            heads -= 1
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out_proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def mhsa(self, t):
        n, L, c = t.shape
        d = c // self.heads
        q, k, v = self.qkv(t).reshape(n, L, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(n, L, c)
        return self.out_proj(o)

    def forward(self, x):
        n, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.mhsa(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(n, c, h, w)


class RefinementBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv5 = ConvBNMish(channels, channels, 5)
        self.conv3 = ConvBNMish(channels, channels, 3)
        self.conv1 = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return self.conv1(self.conv3(self.conv5(x)))


class TemporalFusionGate(nn.Module):
    """Order-invariant fusion: gate the mean of the streams by a conv of (mean + |diff|)/2."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)

    def forward(self, z1, z2):
        if z1.shape != z2.shape:
            raise ShapeMismatchError(f"{tuple(z1.shape)} vs {tuple(z2.shape)}")
        a = 0.5 * (z1 + z2)
        d = (z1 - z2).abs()
        c = 0.5 * (a + d)
        m = torch.sigmoid(self.conv(c))
        return m * a
