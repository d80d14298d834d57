"""Learned scale-hyperprior codec, entropy models and range coder."""

from cad.codec.bitstream import Bitstream, BitstreamHeader
from cad.codec.model import (
    CodecConfig,
    FeatureMap,
    LatentPair,
    RasterImage,
    ScaleHyperprior,
    round_half_away,
)


def compression_loss(rate_bits_per_pixel, mse, lam):
    """Rate-distortion Lagrangian ``lam * R + D``."""
    return lam * rate_bits_per_pixel + mse


__all__ = [
    "Bitstream",
    "BitstreamHeader",
    "CodecConfig",
    "FeatureMap",
    "LatentPair",
    "RasterImage",
    "ScaleHyperprior",
    "compression_loss",
    "round_half_away",
]
