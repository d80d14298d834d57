"""Homography algebra and differentiable projective warping.

All homographies act on *centred pixel coordinates*: the continuous image
plane of an ``A x B`` grid spans ``[-B/2, B/2] x [-A/2, A/2]`` with pixel
centres at half-integer offsets from the edges (so the centre pixel of an
odd-sized image sits exactly at the origin).  With this convention a change
of resolution by a factor ``s`` is exactly ``diag(s, s, 1)`` and rotations
about the image centre are purely linear.

``warp(t, H)`` moves image content by ``H``: the output at location ``p``
is ``t`` sampled at ``H^-1 p`` (inverse mapping), bilinear, zero outside.
Consequently ``warp(warp(t, B), A) == warp(t, compose(A, B))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from cad.errors import SingularHomographyError, ShapeMismatchError

MIN_ABS_DET = 1e-8
_BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class Homography:
    """A single 3x3 projective transform, normalised so ``H[2, 2] == 1``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeMismatchError(f"homography must be 3x3, got {m.shape}")
        object.__setattr__(self, "matrix", m / m[2, 2])

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Homography":
        return cls(t.detach().cpu().double().numpy().reshape(3, 3))

    def tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.as_tensor(self.matrix, dtype=dtype, device=device)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def to_bytes(self) -> bytes:
        """9 little-endian float64 values, row-major."""
        return struct.pack("<9d", *self.matrix.ravel())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Homography":
        if len(data) != 72:
            raise ShapeMismatchError(f"expected 72 bytes, got {len(data)}")
        return cls(np.array(struct.unpack("<9d", data)).reshape(3, 3))


def _as_tensor(H) -> torch.Tensor:
    if isinstance(H, Homography):
        return H.tensor()
    return H


def identity(batch: int | None = None, dtype=torch.float32, device=None) -> torch.Tensor:
    eye = torch.eye(3, dtype=dtype, device=device)
    if batch is None:
        return eye
    return eye.expand(batch, 3, 3).clone()


def normalize(H: torch.Tensor) -> torch.Tensor:
    return H / H[..., 2:3, 2:3]


def check_invertible(H: torch.Tensor, min_abs_det: float = MIN_ABS_DET) -> None:
    det = torch.linalg.det(H.detach().double())
    if not torch.isfinite(det).all() or (det.abs() < min_abs_det).any():
        raise SingularHomographyError(
            f"homography determinant too small: {det.abs().min().item():.3g}")


def compose(outer, inner):
    """Homography applying ``inner`` first, then ``outer``."""
    if isinstance(outer, Homography) and isinstance(inner, Homography):
        out = outer.matrix @ inner.matrix
        if abs(np.linalg.det(out)) < MIN_ABS_DET * abs(out[2, 2]) ** 3:
            raise SingularHomographyError("composition is singular")
        return Homography(out)
    out = normalize(_as_tensor(outer) @ _as_tensor(inner))
    check_invertible(out)
    return out


def invert(H):
    if isinstance(H, Homography):
        return H.inverse()
    return normalize(torch.linalg.inv(H))


def rescale_homography(H, s: float):
    """Express ``H`` on a grid whose coordinates are scaled by ``s``."""
    if s <= 0:
        raise ValueError("scale must be positive")
    if isinstance(H, Homography):
        S = np.diag([s, s, 1.0])
        return Homography(S @ H.matrix @ np.diag([1.0 / s, 1.0 / s, 1.0]))
    # S H S^-1 scales the translation column up and the perspective row down.
    scale = H.new_tensor([[1.0, 1.0, s], [1.0, 1.0, s], [1.0 / s, 1.0 / s, 1.0]])
    return normalize(H * scale)


def translation(tx: float, ty: float) -> Homography:
    return Homography(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))


def pixel_grid(height: int, width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Homogeneous centred coordinates of all pixel centres, shape (H*W, 3)."""
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5 - height / 2
    xs = torch.arange(width, dtype=dtype, device=device) + 0.5 - width / 2
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1), torch.ones_like(gx).reshape(-1)], dim=-1)


def corners(height: int, width: int, dtype=torch.float64) -> torch.Tensor:
    """Outermost pixel-centre corners as homogeneous points, shape (4, 3)."""
    hx, hy = width / 2 - 0.5, height / 2 - 0.5
    return torch.tensor([[-hx, -hy, 1.0], [hx, -hy, 1.0], [hx, hy, 1.0], [-hx, hy, 1.0]], dtype=dtype)


def transform_points(H: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Apply (B,3,3) or (3,3) homographies to homogeneous points (N,3); returns (..., N, 2)."""
    out = pts @ H.transpose(-1, -2)
    return out[..., :2] / out[..., 2:3]


def corner_error(H_est, H_ref, height: int, width: int) -> torch.Tensor:
    """Mean Euclidean distance between corners mapped by two homographies."""
    c = corners(height, width)
    a = transform_points(_as_tensor(H_est).double(), c)
    b = transform_points(_as_tensor(H_ref).double(), c)
    return (a - b).norm(dim=-1).mean(dim=-1)


def _bilinear(t: torch.Tensor, ix: torch.Tensor, iy: torch.Tensor) -> torch.Tensor:
    """Zero-padded bilinear lookup of (N,K,A,B) ``t`` at float64 array coordinates (N,P)."""
    n, k, a, b = t.shape
    flat = t.reshape(n, k, a * b)
    x0, y0 = torch.floor(ix), torch.floor(iy)
    fx, fy = (ix - x0).to(t.dtype), (iy - y0).to(t.dtype)
    x0, y0 = x0.long(), y0.long()
    out = t.new_zeros(n, k, ix.shape[1])
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < b) & (yi >= 0) & (yi < a)
        idx = (yi.clamp(0, a - 1) * b + xi.clamp(0, b - 1)).unsqueeze(1).expand(n, k, -1)
        out = out + torch.gather(flat, 2, idx) * (wgt * inside).unsqueeze(1)
    return out


def warp(t: torch.Tensor, H, out_dims: tuple[int, int] | None = None,
         return_mask: bool = False):
    """Bilinearly resample ``t`` (K,A,B) or (N,K,A,B) under homography ``H``.

    ``H`` is (3,3) or (N,3,3) in centred pixel coordinates of ``t``'s grid;
    ``out_dims`` defaults to the input size and shares the same pixel units.
    Out-of-bounds samples are zero.  Differentiable in both ``t`` and ``H``.
    With ``return_mask`` a boolean (N,1,A',B') mask of fully in-bounds
    samples is returned too.
    """
    H = _as_tensor(H)
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    n, _, in_h, in_w = t.shape
    if H.dim() == 2:
        H = H.unsqueeze(0).expand(n, 3, 3)
    if H.shape[0] != n:
        raise ShapeMismatchError(f"{H.shape[0]} homographies for {n} images")
    check_invertible(H)
    out_h, out_w = out_dims if out_dims is not None else (in_h, in_w)

    # Coordinate arithmetic in float64 keeps integer shifts exact.
    Hinv = torch.linalg.inv(H.double())
    pts = pixel_grid(out_h, out_w, device=t.device)
    src = pts @ Hinv.transpose(-1, -2)
    w = src[..., 2]
    front = w > 1e-12
    w_safe = torch.where(front, w, torch.ones_like(w))
    sx = src[..., 0] / w_safe
    sy = src[..., 1] / w_safe
    off = torch.full_like(sx, -4.0)
    ix = torch.where(front, sx + (in_w / 2 - 0.5), off)
    iy = torch.where(front, sy + (in_h / 2 - 0.5), off)
    out = _bilinear(t, ix.reshape(n, -1), iy.reshape(n, -1)).reshape(n, -1, out_h, out_w)
    if squeeze:
        out = out.squeeze(0)
    if not return_mask:
        return out
    with torch.no_grad():
        mask = (front
                & (sx.abs() <= in_w / 2 - 0.5 + _BOUNDS_TOL)
                & (sy.abs() <= in_h / 2 - 0.5 + _BOUNDS_TOL))
        mask = mask.reshape(n, 1, out_h, out_w)
    if squeeze:
        mask = mask.squeeze(0)
    return out, mask


def offsets_to_homography(offsets: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Map (N,8) offsets in normalised [-1,1] coordinates to pixel homographies.

    The offsets are added to the flattened identity with ``H[2,2]`` fixed at 1,
    then conjugated into the centred pixel frame of a ``height x width`` grid.
    """
    n = offsets.shape[0]
    flat = torch.cat([offsets, offsets.new_zeros(n, 1)], dim=1)
    Hn = torch.eye(3, dtype=offsets.dtype, device=offsets.device) + flat.reshape(n, 3, 3)
    sx, sy = width / 2, height / 2
    scale = offsets.new_tensor([[1.0, sx / sy, sx], [sy / sx, 1.0, sy], [1.0 / sx, 1.0 / sy, 1.0]])
    return Hn * scale
