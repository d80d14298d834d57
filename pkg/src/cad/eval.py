"""Metrics, the multi-seed distortion protocol, rate/F1 curves and complexity counts.

Conventions:

* F1 is micro-averaged: confusion counts are pooled over every scored pixel
  of every image before precision and recall are formed.  Pixels outside
  the region the distorted second image still covers are not scored.
* Standard deviations are population (``ddof=0``) over evaluation seeds.
* FLOPs are ``2 * MACs`` of convolution, transposed-convolution and linear
  layers, counted with forward hooks; functional ops (attention products,
  grid sampling, pooling, activations, normalisation) are not counted.
* PSNR of identical images is ``inf``; files store it capped at 99 dB.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cad.changedetect import TieCD, cd_loss
from cad.checkpoint import load_checkpoint
from cad.distort import DistortionSpec, ToyDataset
from cad.pipeline import CADModel
from cad.registration import Light2Reg

PSNR_CAP_DB = 99.0


# ----------------------------------------------------------------- F1

@dataclass
class ConfusionAccumulator:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def update(self, pred, gt, mask=None) -> "ConfusionAccumulator":
        pred = torch.as_tensor(pred).bool()
        gt = torch.as_tensor(gt).bool()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
        if mask is None:
            mask = torch.ones_like(pred)
        mask = torch.as_tensor(mask).bool().expand_as(pred)
        self.tp += int((pred & gt & mask).sum())
        self.fp += int((pred & ~gt & mask).sum())
        self.fn += int((~pred & gt & mask).sum())
        self.tn += int((~pred & ~gt & mask).sum())
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.tp + other.tp, self.fp + other.fp,
                                    self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def f1_micro(acc: ConfusionAccumulator) -> dict:
    """Precision, recall and F1 of the change class.

    With nothing to find and nothing claimed the score is perfect; with
    no true positive but some error it is zero.
    """
    tp, fp, fn = acc.tp, acc.fp, acc.fn
    if tp == 0:
        if fp == 0 and fn == 0:
            return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
        return {"precision": 0.0 if fp else 1.0, "recall": 0.0 if fn else 1.0, "f1": 0.0}
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return {"precision": p, "recall": r, "f1": 2 * p * r / (p + r)}


def psnr(x, x_hat, peak: float = 255.0) -> float:
    x = torch.as_tensor(x, dtype=torch.float64)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float64)
    mse = float(((x - x_hat) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 / mse)


def psnr_for_file(value: float) -> float:
    return min(value, PSNR_CAP_DB)


# ----------------------------------------------------------------- protocol

def actual_bpp(model: CADModel, images: torch.Tensor) -> torch.Tensor:
    """Per-image bits per pixel of real bitstreams (header included)."""
    codec = model.codec
    if not codec._frozen:
        codec.freeze()
    out = []
    for x in images:
        q = codec.quantize(codec.encode(x[None]), "eval")
        out.append(codec.entropy_encode(q).bpp)
    return torch.tensor(out, dtype=torch.float64)


@torch.no_grad()
def score_dataset(model: CADModel, ds: ToyDataset, compress: bool = True, threshold: float = 0.5,
                  batch_size: int = 32, rate: str = "actual", bpp_t1: torch.Tensor | None = None) -> dict:
    """Micro-F1 over the valid region and mean pair bpp for one distortion draw.

    ``bpp_t1`` optionally supplies precomputed actual rates of ``ds.x1``.
    """
    model.eval()
    acc = ConfusionAccumulator()
    bpps = []
    for i in range(0, len(ds), batch_size):
        sl = slice(i, i + batch_size)
        x1, x2 = ds.x1[sl], ds.x2_distorted[sl]
        out = model(x1, x2, compress=compress)
        acc.update(out["prob"] >= threshold, ds.change[sl] > 0.5, ds.valid[sl])
        if compress:
            if rate == "actual":
                b1 = bpp_t1[sl] if bpp_t1 is not None else actual_bpp(model, x1)
                bpps.append(0.5 * (b1 + actual_bpp(model, x2)))
            else:
                bpps.append(out["bpp"].double())
    res = f1_micro(acc)
    res["bpp"] = float(torch.cat(bpps).mean()) if bpps else float("nan")
    res.update(tp=acc.tp, fp=acc.fp, fn=acc.fn, tn=acc.tn)
    return res


@dataclass
class ProtocolResult:
    f1_mean: float
    f1_std: float
    bpp_mean: float
    bpp_std: float
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_protocol(model: CADModel, dataset: ToyDataset, seeds=range(100),
                      distortion: DistortionSpec | None = None, compress: bool = True,
                      threshold: float = 0.5, rate: str = "actual") -> ProtocolResult:
    """Re-distort the test set once per seed and report mean and std of F1 and bpp."""
    rows = []
    # t1 images do not depend on the distortion draw
    bpp_t1 = actual_bpp(model, dataset.x1) if compress and rate == "actual" else None
    for seed in seeds:
        ds = dataset.with_distortions(int(seed), distortion)
        r = score_dataset(model, ds, compress=compress, threshold=threshold, rate=rate, bpp_t1=bpp_t1)
        rows.append({"seed": int(seed), "f1": r["f1"], "precision": r["precision"],
                     "recall": r["recall"], "bpp": r["bpp"]})
    f1 = np.array([r["f1"] for r in rows])
    bpp = np.array([r["bpp"] for r in rows])
    return ProtocolResult(float(f1.mean()), float(f1.std()), float(bpp.mean()), float(bpp.std()), rows)


@dataclass
class CurvePoint:
    lambda_index: int
    lam: float
    bpp_mean: float
    bpp_std: float
    f1_mean: float
    f1_std: float
    runs: int


def rate_f1_curve(checkpoints, dataset: ToyDataset, seeds=range(100), reference=None,
                  out_dir=None, distortion: DistortionSpec | None = None) -> tuple[list, dict | None]:
    """One point per rate-weighted checkpoint, plus the uncompressed reference.

    ``checkpoints`` are paths of end-to-end checkpoints; ``reference`` is a
    joint registration/detection checkpoint evaluated without compression.
    Writes ``curve.csv`` and ``curve.png`` into ``out_dir`` when given.
    """
    points = []
    for path in checkpoints:
        ckpt = load_checkpoint(path)
        model = CADModel.from_checkpoint(path)
        res = evaluate_protocol(model, dataset, seeds, distortion)
        points.append(CurvePoint(int(ckpt.model["codec"].get("lambda_index", 0)),
                                 float(ckpt.config.get("lam") or 0.0),
                                 res.bpp_mean, res.bpp_std, res.f1_mean, res.f1_std, len(res.per_seed)))
    points.sort(key=lambda p: p.lam)
    ref = None
    if reference is not None:
        r = evaluate_protocol(CADModel.from_checkpoint(reference), dataset, seeds, distortion, compress=False)
        ref = {"f1_mean": r.f1_mean, "f1_std": r.f1_std, "runs": len(r.per_seed)}
    if out_dir is not None:
        write_curve(points, ref, out_dir)
    return points, ref


def write_curve(points: list, ref: dict | None, out_dir) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / "curve.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(points[0]).keys()) if points else ["lambda_index"])
        w.writeheader()
        for p in points:
            w.writerow(asdict(p))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if points:
        ax.errorbar([p.bpp_mean for p in points], [p.f1_mean for p in points],
                    xerr=[p.bpp_std for p in points], yerr=[p.f1_std for p in points],
                    marker="o", color="k", capsize=3, label="compressed")
    if ref is not None:
        ax.axhline(ref["f1_mean"], color="tab:blue", ls="--", label="no compression")
        ax.axhspan(ref["f1_mean"] - ref["f1_std"], ref["f1_mean"] + ref["f1_std"], color="tab:blue", alpha=0.15)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("F1")
    ax.legend(loc="lower right")
    fig.tight_layout()
    png_path = d / "curve.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": str(csv_path), "png": str(png_path)}


# ----------------------------------------------------------------- complexity

def _macs_hook(counter: list):
    def hook(module, inputs, output):
        if isinstance(module, nn.Conv2d):
            k = module.kernel_size[0] * module.kernel_size[1]
            counter[0] += output.numel() * (module.in_channels // module.groups) * k
        elif isinstance(module, nn.ConvTranspose2d):
            k = module.kernel_size[0] * module.kernel_size[1]
            counter[0] += inputs[0].numel() * (module.out_channels // module.groups) * k
        elif isinstance(module, nn.Linear):
            counter[0] += output.numel() * module.in_features
    return hook


@torch.no_grad()
def count_params_flops(model: nn.Module, input_dims, num_inputs: int | None = None) -> dict:
    """Exact trainable-parameter count and hook-based FLOPs (2 per MAC) for one sample."""
    if num_inputs is None:
        num_inputs = 2 if isinstance(model, (CADModel, TieCD, Light2Reg)) else 1
    params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    counter = [0]
    handles = [m.register_forward_hook(_macs_hook(counter)) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
    was_training = model.training
    model.eval()
    try:
        x = torch.zeros(1, *input_dims)
        model(*([x] * num_inputs))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return {"params": params, "macs": counter[0], "flops": 2 * counter[0]}


# ----------------------------------------------------------------- order swap

class ConcatUNet(nn.Module):
    """Early-fusion baseline: the two images are concatenated along channels.

    Nothing ties the two halves of the first layer together, so the output
    depends on input order.
    """

    def __init__(self, image_channels: int = 3, width: int = 16):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
                                 nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU())

        self.enc1 = block(2 * image_channels, width)
        self.enc2 = block(width, 2 * width)
        self.dec = block(3 * width, width)
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, a, b):
        e1 = self.enc1(torch.cat([a, b], dim=1))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        up = F.interpolate(e2, scale_factor=2, mode="bilinear", align_corners=False)
        return self.head(self.dec(torch.cat([up, e1], dim=1)))


def train_cd_pairs(model: nn.Module, ds: ToyDataset, steps: int = 300, batch_size: int = 8,
                   lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit a two-input change detector on undistorted pairs in their given order."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)
    model.train()
    losses = []
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(ds), min(batch_size, len(ds)), replace=False))
        prob = torch.sigmoid(model(ds.x1[idx], ds.x2[idx]))
        loss = cd_loss(prob, ds.change[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return losses


@torch.no_grad()
def order_swap_audit(model: nn.Module, ds: ToyDataset, threshold: float = 0.5,
                     batch_size: int = 32) -> dict:
    """F1 of a two-input detector on undistorted pairs in both orders."""
    model.eval()
    fwd, swp = ConfusionAccumulator(), ConfusionAccumulator()
    for i in range(0, len(ds), batch_size):
        a, b, gt = ds.x1[i:i + batch_size], ds.x2[i:i + batch_size], ds.change[i:i + batch_size] > 0.5
        fwd.update(torch.sigmoid(model(a, b)) >= threshold, gt)
        swp.update(torch.sigmoid(model(b, a)) >= threshold, gt)
    return {"f1_forward": f1_micro(fwd)["f1"], "f1_swapped": f1_micro(swp)["f1"]}
