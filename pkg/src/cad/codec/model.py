"""Scale-hyperprior learned image codec with a decoder feature tap."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cad.codec.bitstream import Bitstream, BitstreamHeader
from cad.codec.entropy import FactorizedPrior, GaussianConditional
from cad.errors import DimensionMismatchError, ModelMismatchError, ShapeMismatchError


@dataclass
class RasterImage:
    """C x H x W image normalised to [0, 1]."""

    data: torch.Tensor
    tile_id: str = ""
    timestamp: int = 0
    value_range: float = 255.0

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ShapeMismatchError(f"RasterImage expects C x H x W, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("image values must be normalised to [0, 1]")

    @classmethod
    def from_uint8(cls, array: np.ndarray, **kwargs) -> "RasterImage":
        """Build from an H x W x C (or H x W) 8-bit array."""
        a = np.asarray(array)
        if a.ndim == 2:
            a = a[:, :, None]
        data = torch.from_numpy(a.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
        return cls(data, value_range=255.0, **kwargs)

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class FeatureMap:
    """F x H/2 x W/2 activations from the decoder's penultimate layer."""

    data: torch.Tensor
    source_tile: str = ""
    source_time: int = 0


@dataclass
class LatentPair:
    """Main latent ``y`` (N,M,H/16,W/16) and hyper latent ``z`` (N,N_z,H/64,W/64)."""

    y: torch.Tensor
    z: torch.Tensor
    quantized: bool = False
    orig_size: tuple[int, int] | None = None
    padded_size: tuple[int, int] | None = None


@dataclass
class CodecConfig:
    in_channels: int = 3
    latent_channels: int = 150
    hyper_channels: int = 225
    hidden_channels: int = 128
    tap_channels: int = 32
    stages: int = 4
    hyper_stages: int = 2
    scale_bound: float = 0.11
    lambda_index: int = 0
    model_id: int | None = None
    factorized_filters: tuple = field(default=(3, 3, 3))


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def _conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


class ScaleHyperprior(nn.Module):
    """Encoder / hyper-encoder / hyper-decoder / decoder with entropy models.

    Analysis uses ``stages`` stride-2 convolutions (y at 1/16 by default)
    and the hyper-analysis ``hyper_stages`` more (z at 1/64).  The synthesis
    path mirrors the analysis; the feature tap is the activation entering the
    final stride-2 transposed convolution, i.e. at half image resolution.
    """

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = c = config or CodecConfig()
        if c.stages < 2 or c.hyper_stages < 1:
            raise ValueError("need at least 2 analysis and 1 hyper stage")
        M, N, Hd, Ft = c.latent_channels, c.hyper_channels, c.hidden_channels, c.tap_channels

        chans = [c.in_channels] + [Hd] * (c.stages - 1) + [M]
        self.g_a = nn.ModuleList(_conv(a, b) for a, b in zip(chans, chans[1:]))

        hchans = [N] * (c.hyper_stages + 1)
        self.h_a = nn.ModuleList([_conv(M, N, 3, 1)] + [_conv(a, b) for a, b in zip(hchans, hchans[1:])])
        schans = [N] * c.hyper_stages + [M]
        self.h_s = nn.ModuleList([_deconv(a, b) for a, b in zip(schans, schans[1:])] + [_conv(M, M, 3, 1)])

        dchans = [M] + [Hd] * (c.stages - 2) + [Ft]
        self.g_s = nn.ModuleList(_deconv(a, b) for a, b in zip(dchans, dchans[1:]))
        self.g_s_out = _deconv(Ft, c.in_channels)

        self.factorized = FactorizedPrior(N, c.factorized_filters)
        self.gaussian = GaussianConditional(c.scale_bound)
        self.model_id = c.model_id if c.model_id is not None else 0
        self._frozen = False

    # ------------------------------------------------------------------ shapes
    @property
    def y_factor(self) -> int:
        return 2 ** self.config.stages

    @property
    def factor(self) -> int:
        return 2 ** (self.config.stages + self.config.hyper_stages)

    def pad(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """Reflect-pad (N,C,H,W) to multiples of the total downsampling factor."""
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionMismatchError(f"image dims must be even, got {h}x{w}")
        ph, pw = -h % self.factor, -w % self.factor
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return x, (h, w)

    def _check_padded(self, x):
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise DimensionMismatchError(f"{h}x{w} is not a multiple of {self.factor}")

    # ----------------------------------------------------------- transforms
    def analysis(self, x):
        for i, conv in enumerate(self.g_a):
            x = conv(x)
            if i < len(self.g_a) - 1:
                x = F.mish(x)
        return x

    def hyper_analysis(self, y):
        x = y.abs()
        for i, conv in enumerate(self.h_a):
            x = conv(x)
            if i < len(self.h_a) - 1:
                x = F.mish(x)
        return x

    def hyper_synthesis(self, z_hat):
        x = z_hat
        for i, conv in enumerate(self.h_s):
            x = conv(x)
            if i < len(self.h_s) - 1:
                x = F.mish(x)
        return F.softplus(x).clamp_min(self.config.scale_bound)

    def synthesis(self, y_hat):
        """Returns the unclamped reconstruction and the feature tap."""
        x = y_hat
        for deconv in self.g_s:
            x = F.mish(deconv(x))
        return self.g_s_out(x), x

    # -------------------------------------------------------------- API
    def encode(self, image) -> LatentPair:
        x = image.data.unsqueeze(0) if isinstance(image, RasterImage) else image
        if x.dim() != 4:
            raise ShapeMismatchError(f"expected N x C x H x W, got {tuple(x.shape)}")
        x, orig = self.pad(x)
        self._check_padded(x)
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        return LatentPair(y, z, False, orig, tuple(x.shape[-2:]))

    def quantize(self, latent: LatentPair, mode: str = "eval", generator=None) -> LatentPair:
        if mode == "eval":
            return replace(latent, y=round_half_away(latent.y), z=round_half_away(latent.z), quantized=True)
        if mode != "train":
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

        def noisy(t):
            u = torch.rand(t.shape, generator=generator, dtype=t.dtype, device=t.device)
            return t + (u - 0.5)

        return replace(latent, y=noisy(latent.y), z=noisy(latent.z), quantized=False)

    def likelihoods(self, latent: LatentPair) -> tuple[torch.Tensor, torch.Tensor]:
        scales = self.hyper_synthesis(latent.z)
        return self.gaussian.likelihood(latent.y, scales), self.factorized.likelihood(latent.z)

    def estimate_rate(self, latent: LatentPair, per_sample: bool = False) -> torch.Tensor:
        """Bits of ``latent`` under the entropy models (probabilities floored at 2**-32)."""
        y_lik, z_lik = self.likelihoods(latent)
        bits = (-torch.log2(y_lik.clamp_min(2.0 ** -32))).flatten(1).sum(1) \
            + (-torch.log2(z_lik.clamp_min(2.0 ** -32))).flatten(1).sum(1)
        return bits if per_sample else bits.sum()

    def decode(self, latent: LatentPair) -> tuple[torch.Tensor, torch.Tensor]:
        """Reconstruction (N,C,H,W) in [0,1] and tap (N,F,H/2,W/2), cropped to the source size."""
        x_hat, tap = self.synthesis(latent.y)
        x_hat = x_hat.clamp(0.0, 1.0)
        if latent.orig_size is not None:
            h, w = latent.orig_size
            x_hat = x_hat[..., :h, :w]
            tap = tap[..., : h // 2, : w // 2]
        return x_hat, tap

    def forward(self, x: torch.Tensor, generator=None) -> dict:
        """Training/evaluation pass: noise proxy when training, rounding otherwise."""
        latent = self.encode(x)
        q = self.quantize(latent, "train" if self.training else "eval", generator)
        bits = self.estimate_rate(q, per_sample=True)
        x_hat, tap = self.decode(q)
        h, w = latent.orig_size
        return {"x_hat": x_hat, "tap": tap, "bits": bits, "bpp": bits / (h * w), "latent": q}

    # ---------------------------------------------------------- coding
    def weights_id(self) -> int:
        crc = 0
        for name, t in sorted(self.state_dict().items()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(t.detach().cpu().contiguous().numpy().tobytes(), crc)
        return crc & 0xFFFF

    @torch.no_grad()
    def freeze(self) -> "ScaleHyperprior":
        """Build CDF tables from the current weights and stamp the model id."""
        self.factorized.build_tables()
        self.gaussian.build_tables()
        if self.config.model_id is None:
            self.model_id = self.weights_id()
        self._frozen = True
        return self

    @torch.no_grad()
    def entropy_encode(self, latent: LatentPair) -> Bitstream:
        if latent.y.shape[0] != 1:
            raise ShapeMismatchError("entropy coding works on one image at a time")
        y = latent.y[0].detach()
        z = latent.z[0].detach()
        if not (torch.equal(y, torch.round(y)) and torch.equal(z, torch.round(z))):
            raise ValueError("entropy coding requires an integer (quantized) latent")
        z_bytes = self.factorized.encode(z.cpu().numpy().astype(np.int64))
        scales = self.hyper_synthesis(latent.z.detach())
        idx = self.gaussian.table_index(scales[0])
        y_bytes = self.gaussian.encode(y.cpu().numpy().astype(np.int64), idx)
        ph, pw = latent.padded_size or (y.shape[-2] * self.y_factor, y.shape[-1] * self.y_factor)
        oh, ow = latent.orig_size or (ph, pw)
        header = BitstreamHeader(self.model_id, self.config.lambda_index, oh, ow, ph, pw)
        return Bitstream(header, z_bytes, y_bytes)

    @torch.no_grad()
    def entropy_decode(self, bs: Bitstream | bytes) -> LatentPair:
        if isinstance(bs, (bytes, bytearray)):
            bs = Bitstream.from_bytes(bytes(bs))
        h = bs.header
        if h.model_id != self.model_id:
            raise ModelMismatchError(f"stream model id {h.model_id} != loaded model id {self.model_id}")
        zf, yf = self.factor, self.y_factor
        dtype = next(self.parameters()).dtype
        z = self.factorized.decode(bs.z_payload, (self.config.hyper_channels, h.padded_h // zf, h.padded_w // zf))
        z_t = torch.from_numpy(z).to(dtype).unsqueeze(0)
        scales = self.hyper_synthesis(z_t)
        idx = self.gaussian.table_index(scales[0])
        y = self.gaussian.decode(bs.y_payload, idx)
        if y.shape != (self.config.latent_channels, h.padded_h // yf, h.padded_w // yf):
            raise ShapeMismatchError("decoded latent shape disagrees with header")
        y_t = torch.from_numpy(y).to(dtype).unsqueeze(0)
        return LatentPair(y_t, z_t, True, (h.orig_h, h.orig_w), (h.padded_h, h.padded_w))

    @torch.no_grad()
    def compress(self, image: RasterImage) -> Bitstream:
        return self.entropy_encode(self.quantize(self.encode(image), "eval"))

    @torch.no_grad()
    def decompress(self, bs: Bitstream | bytes, tile_id: str = "", timestamp: int = 0
                   ) -> tuple[RasterImage, FeatureMap]:
        x_hat, tap = self.decode(self.entropy_decode(bs))
        return RasterImage(x_hat[0], tile_id, timestamp), FeatureMap(tap[0], tile_id, timestamp)
