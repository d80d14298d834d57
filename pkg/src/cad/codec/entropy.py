"""Entropy models for the scale hyperprior.

``FactorizedPrior`` is the non-parametric per-channel density used for the
hyper-latent; ``GaussianConditional`` is the zero-mean Gaussian convolved
with a unit uniform used for the main latent.  Both return likelihoods of
integer-centred unit bins and, once frozen, integer CDF tables for the range
coder.  Values falling outside a table are coded as an escape symbol
followed by a raw 16-bit zig-zag value.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr, ndtri

from cad.codec.rangecoder import TOTAL, RangeDecoder, RangeEncoder, cumulative, quantize_pmf
from cad.errors import ModelNotInitializedError, SymbolOutOfRangeError

LIKELIHOOD_BOUND = 2.0 ** -32
RAW_BITS = 16
TAIL_MASS = 1e-6


def zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


def unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def bits_from_likelihood(likelihood: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihood.clamp_min(LIKELIHOOD_BOUND)).sum()


def std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


class FactorizedPrior(nn.Module):
    """Learned per-channel cumulative density, evaluated on unit bins."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
        self._tables = None

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is (C, 1, N); returns logits of the CDF at ``x``."""
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """Probability mass of the unit bin centred at each element of (B,C,H,W) ``z``."""
        b, c, h, w = z.shape
        v = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        # Evaluate in the tail where the sigmoid is not saturated.
        sign = -torch.sign(lower + upper).detach()
        lik = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def build_tables(self, search: int = 256, tail_mass: float = TAIL_MASS) -> None:
        ks = np.arange(-search, search + 1)
        edges = torch.arange(-search - 0.5, search + 1.0, 1.0, dtype=torch.float64)
        model = copy.deepcopy(self).double()
        cdf = torch.sigmoid(model.logits_cdf(edges.expand(self.channels, 1, -1)))
        cdf = cdf.reshape(self.channels, -1).numpy()
        tables = []
        for c in cdf:
            lo = int(np.searchsorted(c[1:], tail_mass / 2, side="right"))
            hi = max(lo, int(np.searchsorted(c[:-1], 1 - tail_mass / 2, side="left")) - 1)
            probs = np.diff(c)[lo:hi + 1]
            escape = max(1.0 - probs.sum(), 0.0)
            tables.append((int(ks[lo]), cumulative(quantize_pmf(np.append(probs, escape)))))
        self._tables = tables

    @property
    def tables(self):
        if self._tables is None:
            raise ModelNotInitializedError("factorized prior tables not built; call freeze()")
        return self._tables

    def encode(self, z: np.ndarray) -> bytes:
        """Range-code an integer (C,H,W) array channel by channel."""
        tables = self.tables
        enc = RangeEncoder()
        for ch in range(z.shape[0]):
            offset, cdf = tables[ch]
            for v in z[ch].ravel().tolist():
                _encode_value(enc, cdf, int(v) - offset, int(v))
        return enc.finish()

    def decode(self, data: bytes, shape) -> np.ndarray:
        tables = self.tables
        dec = RangeDecoder(data)
        c, h, w = shape
        out = np.empty((c, h * w), dtype=np.int64)
        for ch in range(c):
            offset, cdf = tables[ch]
            for i in range(h * w):
                out[ch, i] = _decode_value(dec, cdf, offset)
        return out.reshape(c, h, w)


class GaussianConditional(nn.Module):
    """Zero-mean Gaussian convolved with U(-1/2, 1/2), indexed by a scale table."""

    def __init__(self, scale_bound: float = 0.11, num_scales: int = 128, max_scale: float = 64.0):
        super().__init__()
        self.scale_bound = scale_bound
        table = np.exp(np.linspace(math.log(scale_bound), math.log(max_scale), num_scales))
        self.scale_table = table
        self._tables = None

    def likelihood(self, y: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
        scales = scales.clamp_min(self.scale_bound)
        v = y.abs()
        upper = std_normal_cdf((0.5 - v) / scales)
        lower = std_normal_cdf((-0.5 - v) / scales)
        return upper - lower

    @torch.no_grad()
    def build_tables(self, tail_mass: float = TAIL_MASS) -> None:
        z = float(ndtri(1 - tail_mass / 2))
        tables = []
        for s in self.scale_table:
            n = max(1, int(math.ceil(s * z)))
            ks = np.arange(-n, n + 1, dtype=np.float64)
            pmf = ndtr((ks + 0.5) / s) - ndtr((ks - 0.5) / s)
            escape = max(1.0 - pmf.sum(), 0.0)
            tables.append((-n, cumulative(quantize_pmf(np.append(pmf, escape)))))
        self._tables = tables

    @property
    def tables(self):
        if self._tables is None:
            raise ModelNotInitializedError("Gaussian tables not built; call freeze()")
        return self._tables

    def table_index(self, scales: torch.Tensor) -> np.ndarray:
        """Index of the table scale nearest (in log space) to each clamped scale."""
        table = self.scale_table
        s = scales.detach().double().clamp_min(self.scale_bound).cpu().numpy()
        step = math.log(table[-1] / table[0]) / (len(table) - 1)
        idx = np.rint((np.log(s) - math.log(table[0])) / step).astype(np.int64)
        return np.clip(idx, 0, len(table) - 1)

    def encode(self, y: np.ndarray, indexes: np.ndarray) -> bytes:
        tables = self.tables
        enc = RangeEncoder()
        for v, i in zip(y.ravel().tolist(), indexes.ravel().tolist()):
            offset, cdf = tables[i]
            _encode_value(enc, cdf, int(v) - offset, int(v))
        return enc.finish()

    def decode(self, data: bytes, indexes: np.ndarray) -> np.ndarray:
        tables = self.tables
        dec = RangeDecoder(data)
        out = np.empty(indexes.size, dtype=np.int64)
        for j, i in enumerate(indexes.ravel().tolist()):
            offset, cdf = tables[i]
            out[j] = _decode_value(dec, cdf, offset)
        return out.reshape(indexes.shape)


def _encode_value(enc: RangeEncoder, cdf: list[int], symbol: int, value: int) -> None:
    escape = len(cdf) - 2
    if 0 <= symbol < escape:
        enc.encode_symbol(cdf, symbol)
        return
    raw = zigzag(value)
    if raw >= 1 << RAW_BITS:
        raise SymbolOutOfRangeError(f"latent value {value} exceeds the {RAW_BITS}-bit escape range")
    enc.encode_symbol(cdf, escape)
    enc.encode(raw, 1)


def _decode_value(dec: RangeDecoder, cdf: list[int], offset: int) -> int:
    symbol = dec.decode_symbol(cdf)
    if symbol < len(cdf) - 2:
        return symbol + offset
    raw = dec.decode_target()
    dec.consume(raw, 1)
    return unzigzag(raw)


assert TOTAL == 1 << RAW_BITS  # raw values are coded as one uniform 16-bit symbol
