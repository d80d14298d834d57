"""Compress, register and detect: the assembled system, the tile store and inference.

Store layout (``TileStore``)::

    <root>/index.json           {"version": 1, "entries": {"<tile_id>@<timestamp>": {...}}}
    <root>/tiles/<sha256>.cadb  raw bitstream bytes

Each index entry holds ``tile_id``, ``timestamp``, ``file``, ``sha256``,
``num_bytes``, ``bpp``, ``model_id``, ``lambda_index``, ``geo``, ``height``
and ``width``.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from cad.changedetect import ChangeMap, TieCD, TieCDConfig
from cad.checkpoint import load_checkpoint
from cad.codec import Bitstream, CodecConfig, RasterImage, ScaleHyperprior
from cad.errors import (
    DuplicateKeyError,
    KeyNotFoundError,
    ModelMismatchError,
    ShapeMismatchError,
    StorageFullError,
    CorruptStreamError,
)
from cad.registration import Homography, Light2Reg, RegressorConfig, warp
from cad.registration.light2reg import LevelConfig


# ----------------------------------------------------------------- model

@dataclass
class ModelConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    registration: RegressorConfig = field(default_factory=RegressorConfig)
    cd: TieCDConfig = field(default_factory=TieCDConfig)

    def __post_init__(self):
        if isinstance(self.codec, dict):
            c = dict(self.codec)
            c["factorized_filters"] = tuple(c.get("factorized_filters", (3, 3, 3)))
            self.codec = CodecConfig(**c)
        if isinstance(self.registration, dict):
            self.registration = RegressorConfig(**self.registration)
        if isinstance(self.cd, dict):
            self.cd = TieCDConfig(**self.cd)
        f = self.codec.tap_channels
        if self.registration.feature_channels != f or self.cd.in_channels != f:
            raise ShapeMismatchError(
                f"tap width must agree: codec {f}, registration {self.registration.feature_channels}, "
                f"cd {self.cd.in_channels}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"]["factorized_filters"] = list(self.codec.factorized_filters)
        return d


def toy_model_config(variant: str = "S") -> ModelConfig:
    """Small widths for 64 x 64 desk-scale experiments."""
    tap = 16
    return ModelConfig(
        codec=CodecConfig(latent_channels=32, hyper_channels=32, hidden_channels=32, tap_channels=tap),
        registration=RegressorConfig(
            levels=[LevelConfig(0.25, 16, 3, True), LevelConfig(0.5, 32, 3), LevelConfig(1.0, 48, 3)],
            feature_channels=tap),
        cd=TieCDConfig(in_channels=tap, base_width=16, size_variant=variant),
    )


def full_model_config(variant: str = "L") -> ModelConfig:
    return ModelConfig(cd=TieCDConfig(size_variant=variant))


def attach_cd_state(cd: TieCD, state: dict) -> None:
    """Load TieCD weights, attaching or dropping the pixel stem to match ``state``."""
    has_stem = any(k.startswith("stem.") for k in state)
    if has_stem and cd.stem is None:
        cd.attach_stem()
    elif not has_stem and cd.stem is not None:
        cd.detach_stem()
    cd.load_state_dict(state)


class CADModel(nn.Module):
    """Codec, Light2Reg and TieCD wired together.

    With ``compress=True`` both images go through the codec; registration
    sees the reconstructions and taps.  Detection runs on ``(z1, w2)`` when
    TieCD has no pixel stem, otherwise on the reconstructed pixels with
    ``x2_hat`` warped by the estimated homography.  With ``compress=False``
    registration and detection operate on raw pixels.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.codec = ScaleHyperprior(self.config.codec)
        self.registration = Light2Reg(self.config.registration)
        self.cd = TieCD(self.config.cd)

    @property
    def input_space(self) -> str:
        return "feature" if self.cd.stem is None else "pixel"

    def forward(self, x1, x2, compress: bool = True, generator=None) -> dict:
        out = {}
        if compress:
            n = x1.shape[0]
            c = self.codec(torch.cat([x1, x2]), generator)
            x1_hat, x2_hat = c["x_hat"][:n], c["x_hat"][n:]
            z1, z2 = c["tap"][:n], c["tap"][n:]
            out.update(bpp_t1=c["bpp"][:n], bpp_t2=c["bpp"][n:], bpp=0.5 * (c["bpp"][:n] + c["bpp"][n:]))
        else:
            x1_hat, x2_hat, z1, z2 = x1, x2, None, None
        reg = self.registration(x1_hat, x2_hat, z1, z2)
        if self.cd.stem is None:
            if not compress:
                raise ValueError("feature-space detection needs codec taps; attach the pixel stem")
            logits = self.cd(z1, reg["w2"])
        else:
            logits = self.cd(x1_hat, warp(x2_hat, reg["H"]))
        out.update(logits=logits, prob=torch.sigmoid(logits), registration=reg,
                   x1_hat=x1_hat, x2_hat=x2_hat)
        return out

    def state_modules(self) -> dict:
        return {"codec": self.codec.state_dict(),
                "registration": self.registration.state_dict(),
                "cd": self.cd.state_dict()}

    def load_modules(self, modules: dict, which=("codec", "registration", "cd")) -> None:
        for name in which:
            if name not in modules:
                raise KeyError(f"checkpoint has no {name!r} weights")
            if name == "cd":
                attach_cd_state(self.cd, modules["cd"])
            else:
                getattr(self, name).load_state_dict(modules[name])

    @classmethod
    def from_checkpoint(cls, path) -> "CADModel":
        ckpt = load_checkpoint(path)
        model = cls(ModelConfig(**ckpt.model))
        model.load_modules(ckpt.modules)
        model.eval()
        return model


# ----------------------------------------------------------------- store

@dataclass(frozen=True)
class TileKey:
    tile_id: str
    timestamp: int

    def __str__(self):
        return f"{self.tile_id}@{self.timestamp}"

    @classmethod
    def parse(cls, text: str) -> "TileKey":
        tile, _, ts = str(text).rpartition("@")
        if not tile:
            raise KeyNotFoundError(f"malformed key {text!r}; expected <tile_id>@<timestamp>")
        return cls(tile, int(ts))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class TileStore:
    """Filesystem-backed store of bitstreams keyed by ``(tile_id, timestamp)``."""

    def __init__(self, root, capacity_bytes: int | None = None):
        self.root = Path(root)
        self.capacity_bytes = capacity_bytes
        (self.root / "tiles").mkdir(parents=True, exist_ok=True)
        self._index_path = self.root / "index.json"
        if not self._index_path.exists():
            self._write_index({})

    def _read_index(self) -> dict:
        return json.loads(self._index_path.read_text())["entries"]

    def _write_index(self, entries: dict) -> None:
        _atomic_write(self._index_path, json.dumps({"version": 1, "entries": entries}, indent=1).encode())

    def keys(self) -> list[TileKey]:
        return [TileKey(e["tile_id"], e["timestamp"]) for e in self._read_index().values()]

    def __contains__(self, key) -> bool:
        return str(key) in self._read_index()

    @property
    def used_bytes(self) -> int:
        return sum(e["num_bytes"] for e in self._read_index().values())

    def put(self, key: TileKey, data: bytes, meta: dict | None = None) -> dict:
        entries = self._read_index()
        if str(key) in entries:
            raise DuplicateKeyError(f"{key} already stored")
        if self.capacity_bytes is not None and self.used_bytes + len(data) > self.capacity_bytes:
            raise StorageFullError(
                f"storing {len(data)} B would exceed capacity ({self.used_bytes}/{self.capacity_bytes} B used)")
        digest = hashlib.sha256(data).hexdigest()
        name = f"tiles/{digest}.cadb"
        _atomic_write(self.root / name, data)
        entry = {"tile_id": key.tile_id, "timestamp": key.timestamp, "file": name,
                 "sha256": digest, "num_bytes": len(data), **(meta or {})}
        entries[str(key)] = entry
        self._write_index(entries)
        return entry

    def meta(self, key) -> dict:
        entries = self._read_index()
        if str(key) not in entries:
            raise KeyNotFoundError(f"{key} not in store")
        return entries[str(key)]

    def fetch(self, key) -> bytes:
        """Stored bytes, after checking them against the recorded SHA-256."""
        entry = self.meta(key)
        data = (self.root / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CorruptStreamError(f"content hash mismatch for {key}")
        return data


def ingest(store: TileStore, codec: ScaleHyperprior, image: RasterImage, geo: str = "") -> TileKey:
    """Compress ``image`` and store it under ``(tile_id, timestamp)``."""
    key = TileKey(image.tile_id, image.timestamp)
    if key in store:
        raise DuplicateKeyError(f"{key} already stored")
    if not codec._frozen:
        codec.freeze()
    bs = codec.compress(image)
    h, w = image.data.shape[-2:]
    store.put(key, bs.to_bytes(), {"bpp": bs.bpp, "model_id": bs.header.model_id,
                                   "lambda_index": bs.header.lambda_index,
                                   "geo": geo, "height": h, "width": w})
    return key


# ----------------------------------------------------------------- inference

@dataclass
class PipelineConfig:
    input_space: str = "feature"
    threshold: float = 0.5
    checkpoint: str | None = None
    reingest: bool = True

    def __post_init__(self):
        if self.input_space not in ("feature", "pixel"):
            raise ValueError(f"input_space must be 'feature' or 'pixel', got {self.input_space!r}")


@torch.no_grad()
def run_cad(store: TileStore, key_t1, image_t2: RasterImage, model: CADModel,
            cfg: PipelineConfig | None = None) -> tuple[ChangeMap, dict]:
    """Detect changes between a stored tile and a new acquisition, in the t1 frame."""
    cfg = cfg or PipelineConfig()
    if cfg.input_space != model.input_space:
        raise ModelMismatchError(f"pipeline wants {cfg.input_space} input but TieCD is in {model.input_space} mode")
    model.eval()
    codec = model.codec
    if not codec._frozen:
        codec.freeze()
    key_t1 = key_t1 if isinstance(key_t1, TileKey) else TileKey.parse(key_t1)

    t0 = time.perf_counter()
    data = store.fetch(key_t1)
    bs1 = Bitstream.from_bytes(data)
    x1_hat, z1 = codec.decode(codec.entropy_decode(bs1))
    bs2 = codec.compress(image_t2)
    x2_hat, z2 = codec.decode(codec.entropy_decode(bs2))
    if x1_hat.shape != x2_hat.shape:
        raise ShapeMismatchError(f"t1 {tuple(x1_hat.shape)} vs t2 {tuple(x2_hat.shape)}")
    key_t2 = TileKey(image_t2.tile_id, image_t2.timestamp)
    if cfg.reingest and key_t2 not in store:
        h, w = image_t2.data.shape[-2:]
        store.put(key_t2, bs2.to_bytes(), {"bpp": bs2.bpp, "model_id": bs2.header.model_id,
                                           "lambda_index": bs2.header.lambda_index,
                                           "geo": store.meta(key_t1).get("geo", ""),
                                           "height": h, "width": w})
    t1 = time.perf_counter()
    reg = model.registration(x1_hat, x2_hat, z1, z2)
    t2 = time.perf_counter()
    if cfg.input_space == "feature":
        logits = model.cd(z1, reg["w2"])
    else:
        logits = model.cd(x1_hat, warp(x2_hat, reg["H"]))
    change = ChangeMap(torch.sigmoid(logits)[:, 0], cfg.threshold)
    t3 = time.perf_counter()

    report = {
        "key_t1": str(key_t1),
        "key_t2": str(key_t2),
        "bpp_t1": bs1.bpp,
        "bpp_t2": bs2.bpp,
        "H1": Homography.from_tensor(reg["H"][0]).matrix.tolist(),
        "input_space": cfg.input_space,
        "timings": {"codec": t1 - t0, "registration": t2 - t1, "cd": t3 - t2, "total": t3 - t0},
    }
    return change, report


def export_change_map(change: ChangeMap, directory, stem: str = "change") -> dict:
    """Write a binary PNG mask and a float32 TIFF of probabilities; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prob = change.prob.detach().cpu().float()
    if prob.dim() == 3:
        prob = prob[0]
    mask = (prob >= change.threshold).numpy().astype(np.uint8) * 255
    png, tif = d / f"{stem}_mask.png", d / f"{stem}_prob.tif"
    Image.fromarray(mask).save(png)
    Image.fromarray(prob.numpy().astype(np.float32), mode="F").save(tif)
    return {"mask_png": str(png), "prob_tiff": str(tif)}


def hardware_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "torch": torch.__version__,
            "threads": torch.get_num_threads(), "device": "cpu"}


def throughput_benchmark(model: CADModel, image_size: int | tuple[int, int] = 64, iters: int = 5,
                         input_space: str | None = None, workdir=None, seed: int = 0) -> dict:
    """Median wall-clock pixels/second of ``run_cad`` on synthetic pairs.

    ``image_size`` is a side length or an ``(height, width)`` pair.
    """
    h, w = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    cfg = PipelineConfig(input_space=input_space or model.input_space, reingest=False)
    rng = np.random.default_rng(seed)
    ch = model.config.codec.in_channels
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        store = TileStore(tmp)
        x1 = torch.tensor(rng.uniform(0, 1, (ch, h, w)), dtype=torch.float32)
        key = ingest(store, model.codec, RasterImage(x1, "bench", 0))
        times = []
        for i in range(iters + 1):
            x2 = torch.tensor(rng.uniform(0, 1, (ch, h, w)), dtype=torch.float32)
            t = time.perf_counter()
            run_cad(store, key, RasterImage(x2, "bench", i + 1), model, cfg)
            times.append(time.perf_counter() - t)
    times = times[1:]  # first call warms caches
    med = statistics.median(times)
    return {"image_size": [h, w], "iters": iters, "median_seconds": med,
            "pixels_per_second": h * w / med, "input_space": cfg.input_space,
            "hardware": hardware_info()}
