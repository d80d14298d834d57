"""Synthetic geometric distortions and a toy change-detection corpus.

Scenes are 8-bit-quantised renders of rectangles and discs over a smooth
random texture.  Between the two acquisitions a fraction of the objects is
removed or new objects appear; the second image is then warped by a random
projective transform whose exact matrix is kept as ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from cad.registration.homography import Homography, invert, warp


@dataclass(frozen=True)
class DistortionSpec:
    """Uniform sampling bounds; perspective is per pixel of image width."""

    max_translation_frac: float = 0.1
    max_rotation_deg: float = 10.0
    max_scale_delta: float = 0.1
    max_shear_deg: float = 5.0
    max_perspective: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("max_translation_frac", "max_rotation_deg", "max_scale_delta",
                     "max_shear_deg", "max_perspective"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def none(cls, seed: int = 0) -> "DistortionSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed)

    def scaled(self, factor: float) -> "DistortionSpec":
        return replace(self,
                       max_translation_frac=self.max_translation_frac * factor,
                       max_rotation_deg=self.max_rotation_deg * factor,
                       max_scale_delta=self.max_scale_delta * factor,
                       max_shear_deg=self.max_shear_deg * factor,
                       max_perspective=self.max_perspective * factor)


def sample_transform(spec: DistortionSpec, rng: np.random.Generator,
                     size: tuple[int, int] = (64, 64), max_retries: int = 100) -> Homography:
    """Draw translation, rotation, anisotropic scale, shear and perspective terms.

    The result is ``T @ R @ Sh @ S @ P`` in centred pixel coordinates.
    """
    h, w = size
    for _ in range(max_retries):
        tx, ty = rng.uniform(-1, 1, 2) * spec.max_translation_frac * np.array([w, h])
        theta = math.radians(rng.uniform(-1, 1) * spec.max_rotation_deg)
        sx, sy = 1.0 + rng.uniform(-1, 1, 2) * spec.max_scale_delta
        shear = math.tan(math.radians(rng.uniform(-1, 1) * spec.max_shear_deg))
        px, py = rng.uniform(-1, 1, 2) * spec.max_perspective
        c, s = math.cos(theta), math.sin(theta)
        T = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]])
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        Sh = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]])
        S = np.diag([sx, sy, 1.0])
        P = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1]])
        H = T @ R @ Sh @ S @ P
        if abs(np.linalg.det(H)) >= 1e-6:
            return Homography(H)
    raise RuntimeError("could not sample an invertible transform")


def corner_displacement_bound(spec: DistortionSpec, size: tuple[int, int] = (64, 64)) -> float:
    """Upper bound on how far ``sample_transform`` can move an image corner.

    With ``H c = (A P c)/w + t``: |H c - c| <= |t| + (r L + r delta) / (1 - delta)
    where ``L`` bounds ||A - I||, ``delta`` bounds |w - 1| and ``r`` is the
    corner radius.
    """
    h, w = size
    hx, hy = w / 2 - 0.5, h / 2 - 0.5
    r = math.hypot(hx, hy)
    t = spec.max_translation_frac * math.hypot(w, h)
    theta = math.radians(spec.max_rotation_deg)
    d = spec.max_scale_delta
    shear = math.tan(math.radians(spec.max_shear_deg))
    # ||R Sh S - I|| <= ||R - I|| + ||Sh S - I||,  ||Sh S - I|| <= shear (1 + d) + d
    L = 2 * math.sin(theta / 2) + shear * (1 + d) + d
    delta = spec.max_perspective * (hx + hy)
    if delta >= 1:
        return math.inf
    return t + r * (L + delta) / (1 - delta)


def apply_distortion(image: torch.Tensor, H) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp ``image`` by ``H`` with zero fill; returns the image and its validity mask."""
    return warp(image, H, return_mask=True)


# ----------------------------------------------------------------- toy corpus

@dataclass(frozen=True)
class ToyDatasetSpec:
    num_pairs: int = 64
    image_size: int = 64
    channels: int = 3
    shapes: tuple = ("rectangle", "disc")
    min_objects: int = 5
    max_objects: int = 9
    min_object_size: int = 6
    max_object_size: int = 14
    change_rate: float = 0.2
    add_fraction: float = 0.5
    noise_std: float = 0.01
    texture_seed: int = 0
    seed: int = 0
    distortion: DistortionSpec = field(default_factory=DistortionSpec)


@dataclass
class ToyDataset:
    """Tensors for ``num_pairs`` scenes.

    ``x1``/``x2`` are (N,C,S,S) in [0,1]; ``x2_distorted`` is ``x2`` warped by
    ``H_gt`` (N,3,3, float64); ``change`` is (N,1,S,S) in {0,1} in the t1
    frame; ``valid`` marks t1 pixels that the distorted t2 still covers.
    """

    spec: ToyDatasetSpec
    x1: torch.Tensor
    x2: torch.Tensor
    change: torch.Tensor
    x2_distorted: torch.Tensor
    H_gt: torch.Tensor
    valid: torch.Tensor
    distortion_seed: int = 0

    def __len__(self):
        return self.x1.shape[0]

    def subset(self, idx) -> "ToyDataset":
        idx = torch.as_tensor(list(idx) if isinstance(idx, range) else idx, dtype=torch.long)
        return replace(self, x1=self.x1[idx], x2=self.x2[idx], change=self.change[idx],
                       x2_distorted=self.x2_distorted[idx], H_gt=self.H_gt[idx], valid=self.valid[idx])

    def split(self, n_first: int) -> tuple["ToyDataset", "ToyDataset"]:
        n = len(self)
        return self.subset(range(n_first)), self.subset(range(n_first, n))

    def with_distortions(self, seed: int, spec: DistortionSpec | None = None) -> "ToyDataset":
        """The same scenes re-distorted with transforms drawn from ``seed``."""
        spec = spec or self.spec.distortion
        size = tuple(self.x1.shape[-2:])
        H = torch.stack([sample_transform(spec, np.random.default_rng([seed, i]), size).tensor()
                         for i in range(len(self))])
        x2d, valid = distort_with(self.x2, H)
        return replace(self, x2_distorted=x2d, H_gt=H, valid=valid, distortion_seed=seed)


def distort_with(x2: torch.Tensor, H: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp a batch by ``H`` and return the t1-frame coverage mask."""
    x2d = warp(x2, H)
    ones = torch.ones(x2.shape[0], 1, *x2.shape[-2:], dtype=x2.dtype)
    _, valid = warp(ones, invert(H), return_mask=True)
    return x2d, valid


def sample_batch_transforms(spec: DistortionSpec, rng: np.random.Generator, n: int,
                            size: tuple[int, int]) -> torch.Tensor:
    return torch.stack([sample_transform(spec, rng, size).tensor() for _ in range(n)])


def _texture(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, channels)
    coarse = rng.normal(0.0, 1.0, (channels, 6, 6))
    smooth = np.stack([ndimage.zoom(c, size / 6, order=3) for c in coarse])[:, :size, :size]
    fine = rng.normal(0.0, 1.0, (channels, 16, 16))
    detail = np.stack([ndimage.zoom(c, size / 16, order=1) for c in fine])[:, :size, :size]
    return base[:, None, None] + 0.06 * smooth + 0.03 * detail


def _footprint(shape: str, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)


def _place(rng, spec: ToyDatasetSpec, occupied: np.ndarray, attempts: int = 200):
    size = spec.image_size
    for _ in range(attempts):
        half = rng.uniform(spec.min_object_size, spec.max_object_size) / 2
        cx, cy = rng.uniform(half + 1, size - half - 1, 2)
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        fp = _footprint(shape, cx, cy, half, size)
        grown = ndimage.binary_dilation(fp, iterations=2)
        if not (grown & occupied).any():
            colour = rng.uniform(0.6, 1.0, spec.channels)
            return fp, colour
    return None


def render_pair(spec: ToyDatasetSpec, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One scene at two times: (x1, x2, change) as float arrays, quantised to 8 bits."""
    rng = np.random.default_rng([spec.seed, index])
    tex_rng = np.random.default_rng([spec.texture_seed, index])
    size, ch = spec.image_size, spec.channels
    background = _texture(tex_rng, size, ch)

    occupied = np.zeros((size, size), dtype=bool)
    objects = []
    for _ in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        placed = _place(rng, spec, occupied)
        if placed is None:
            break
        objects.append(placed)
        occupied |= placed[0]

    n_changes = int(round(spec.change_rate * len(objects)))
    removed, added = [], []
    removable = list(range(len(objects)))
    for _ in range(n_changes):
        if rng.uniform() < spec.add_fraction or not removable:
            placed = _place(rng, spec, occupied)
            if placed is not None:
                added.append(placed)
                occupied |= placed[0]
        else:
            removed.append(removable.pop(int(rng.integers(len(removable)))))

    x1 = background.copy()
    x2 = background.copy()
    change = np.zeros((size, size), dtype=bool)
    for i, (fp, colour) in enumerate(objects):
        x1[:, fp] = colour[:, None]
        if i in removed:
            change |= fp
        else:
            x2[:, fp] = colour[:, None]
    for fp, colour in added:
        x2[:, fp] = colour[:, None]
        change |= fp
    x1 = x1 + rng.normal(0, spec.noise_std, x1.shape)
    x2 = x2 + rng.normal(0, spec.noise_std, x2.shape)
    quant = lambda a: np.round(np.clip(a, 0, 1) * 255) / 255  # noqa: E731
    return quant(x1), quant(x2), change


def make_toy_dataset(spec: ToyDatasetSpec | None = None) -> ToyDataset:
    spec = spec or ToyDatasetSpec()
    pairs = [render_pair(spec, i) for i in range(spec.num_pairs)]
    x1 = torch.tensor(np.stack([p[0] for p in pairs]), dtype=torch.float32)
    x2 = torch.tensor(np.stack([p[1] for p in pairs]), dtype=torch.float32)
    change = torch.tensor(np.stack([p[2] for p in pairs]), dtype=torch.float32)[:, None]
    empty = torch.empty(0)
    ds = ToyDataset(spec, x1, x2, change, empty, empty, empty)
    return ds.with_distortions(spec.distortion.seed)


# ----------------------------------------------------------------- storage

def _to_png(t: torch.Tensor, path: Path) -> None:
    a = (t.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(a[:, :, 0] if a.shape[2] == 1 else a).save(path)


def _from_png(path: Path) -> torch.Tensor:
    a = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if a.ndim == 2:
        a = a[:, :, None]
    return torch.from_numpy(a).permute(2, 0, 1).contiguous()


def save_dataset(ds: ToyDataset, directory) -> Path:
    """Write paired PNG rasters plus ``manifest.json`` (H_gt as 9 float64 per pair)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        stem = f"pair_{i:05d}"
        _to_png(ds.x1[i], d / f"{stem}_t1.png")
        _to_png(ds.x2[i], d / f"{stem}_t2.png")
        _to_png(ds.x2_distorted[i], d / f"{stem}_t2_distorted.png")
        _to_png(ds.change[i], d / f"{stem}_change.png")
        entries.append({
            "index": i,
            "t1": f"{stem}_t1.png",
            "t2": f"{stem}_t2.png",
            "t2_distorted": f"{stem}_t2_distorted.png",
            "change": f"{stem}_change.png",
            "H_gt": ds.H_gt[i].double().reshape(-1).tolist(),
            "scene_seed": [ds.spec.seed, i],
            "distortion_seed": [ds.distortion_seed, i],
        })
    spec = asdict(ds.spec)
    spec["shapes"] = list(ds.spec.shapes)
    manifest = {"spec": spec, "distortion_seed": ds.distortion_seed, "pairs": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_dataset(directory) -> ToyDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    s = dict(manifest["spec"])
    s["distortion"] = DistortionSpec(**s["distortion"])
    s["shapes"] = tuple(s["shapes"])
    spec = ToyDatasetSpec(**s)
    entries = manifest["pairs"]
    x1 = torch.stack([_from_png(d / e["t1"]) for e in entries])
    x2 = torch.stack([_from_png(d / e["t2"]) for e in entries])
    change = torch.stack([_from_png(d / e["change"]) for e in entries]).round()
    H = torch.tensor([e["H_gt"] for e in entries], dtype=torch.float64).reshape(-1, 3, 3)
    x2d, valid = distort_with(x2, H)
    return ToyDataset(spec, x1, x2, change, x2d, H, valid, manifest["distortion_seed"])
