"""Staged training: module pretraining, joint registration/detection, end-to-end finetuning.

Stage configs are YAML files whose keys mirror ``StageConfig``; ``model``
and ``data`` are nested mappings for ``ModelConfig`` and ``DataConfig``.
Checkpoints use the container documented in ``cad.checkpoint``; a stage
writes ``last.pt`` and ``best.pt`` into its ``checkpoint_out`` directory.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from cad.changedetect import cd_loss
from cad.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cad.codec import compression_loss
from cad.distort import (
    DistortionSpec,
    ToyDataset,
    ToyDatasetSpec,
    distort_with,
    load_dataset,
    make_toy_dataset,
    sample_batch_transforms,
)
from cad.errors import MissingCheckpointError, TrainingDivergedError
from cad.eval import ConfusionAccumulator, f1_micro, psnr
from cad.pipeline import CADModel, ModelConfig, toy_model_config
from cad.registration import corner_error, invert, registration_loss, registration_pyramids, warp

STAGES = ("pretrain_compression", "pretrain_registration", "pretrain_cd", "joint_reg_cd", "end_to_end")
PREREQUISITES = {
    "joint_reg_cd": ("pretrain_registration", "pretrain_cd"),
    "end_to_end": ("pretrain_compression", "joint_reg_cd"),
}
RATE_STAGES = ("pretrain_compression", "end_to_end")
MIXED_STAGES = ("joint_reg_cd", "end_to_end")
VAL_DISTORTION_SEED = 1_000_003


# ----------------------------------------------------------------- configs

@dataclass
class DataConfig:
    toy: dict = field(default_factory=dict)
    num_train: int = 192
    num_val: int = 32
    num_test: int = 64
    path: str | None = None

    def dataset_spec(self) -> ToyDatasetSpec:
        t = dict(self.toy)
        if "distortion" in t and isinstance(t["distortion"], dict):
            t["distortion"] = DistortionSpec(**t["distortion"])
        if "shapes" in t:
            t["shapes"] = tuple(t["shapes"])
        t["num_pairs"] = self.num_train + self.num_val + self.num_test
        return ToyDatasetSpec(**t)


_SPLIT_CACHE: dict = {}


def make_splits(cfg: DataConfig) -> tuple[ToyDataset, ToyDataset, ToyDataset]:
    """Train / validation / test subsets of one generated (or loaded) corpus."""
    key = (cfg.path, repr(cfg.dataset_spec()))
    if key not in _SPLIT_CACHE:
        ds = load_dataset(cfg.path) if cfg.path else make_toy_dataset(cfg.dataset_spec())
        a, b = cfg.num_train, cfg.num_train + cfg.num_val
        _SPLIT_CACHE[key] = (ds.subset(range(a)), ds.subset(range(a, b)), ds.subset(range(b, len(ds))))
    return _SPLIT_CACHE[key]


@dataclass
class StageConfig:
    stage: str
    epochs: int = 10
    batch_size: int = 8
    learning_rates: dict = field(default_factory=lambda: {"default": 1e-3})
    lr_schedule: dict = field(default_factory=lambda: {"step_epoch": None, "gamma": 0.3})
    lam: float | None = None
    alpha: float | None = None
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_in: dict = field(default_factory=dict)
    checkpoint_out: str | None = None
    validate_every: int = 10
    input_space: str = "feature"
    augment: bool = True
    distortion: dict = field(default_factory=dict)
    lambda_index: int = 0
    steps_per_epoch: int | None = None
    model: dict | None = None
    data: dict | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.stage in RATE_STAGES:
            if self.lam is None or self.lam < 0:
                raise ValueError(f"{self.stage} needs lam >= 0")
        elif self.lam is not None:
            raise ValueError(f"lam only applies to {RATE_STAGES}")
        if self.stage in MIXED_STAGES:
            if self.alpha is None or not 0 <= self.alpha <= 1:
                raise ValueError(f"{self.stage} needs alpha in [0, 1]")
        if self.input_space not in ("feature", "pixel"):
            raise ValueError("input_space must be 'feature' or 'pixel'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "StageConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_yaml(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def distortion_spec(self) -> DistortionSpec:
        return DistortionSpec(**self.distortion)

    def data_config(self) -> DataConfig:
        return DataConfig(**(self.data or {}))


# ----------------------------------------------------------------- losses

def joint_loss(l_cd, l_reg, rate, alpha: float | None, lam: float | None, stage: str):
    """Stage objective from its components.

    ``joint_reg_cd``: ``alpha*l_cd + (1-alpha)*l_reg``; ``end_to_end`` adds
    ``lam*rate``; single-module stages return their own loss.
    """
    if stage == "joint_reg_cd":
        return alpha * l_cd + (1 - alpha) * l_reg
    if stage == "end_to_end":
        return alpha * l_cd + (1 - alpha) * l_reg + lam * rate
    if stage == "pretrain_cd":
        return l_cd
    if stage == "pretrain_registration":
        return l_reg
    if stage == "pretrain_compression":
        return rate
    raise ValueError(f"unknown stage {stage!r}")


def _augment(rng: np.random.Generator, *tensors):
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    out = []
    for t in tensors:
        t = torch.rot90(t, k, dims=(-2, -1))
        out.append(torch.flip(t, dims=(-1,)) if flip else t)
    return out


def stage_step(cfg: StageConfig, model: CADModel, ds: ToyDataset, idx, rng, gen) -> dict:
    """Loss components for one batch of a stage."""
    stage = cfg.stage
    x1, x2, change = ds.x1[idx], ds.x2[idx], ds.change[idx]
    if cfg.augment:
        x1, x2, change = _augment(rng, x1, x2, change)
    size = tuple(x1.shape[-2:])
    out = {}
    if stage == "pretrain_compression":
        x = torch.cat([x1, x2])
        c = model.codec(x, gen)
        mse = torch.mean((c["x_hat"] - x) ** 2)
        bpp = c["bpp"].mean()
        out.update(mse=mse, bpp=bpp, total=compression_loss(bpp, mse, cfg.lam))
        return out
    if stage == "pretrain_registration":
        H = sample_batch_transforms(cfg.distortion_spec(), rng, x1.shape[0], size)
        src = warp(x1, H)
        reg = model.registration(x1, src)
        ref, warped, masks = registration_pyramids(x1, src, reg["H_scale"])
        l_reg = registration_loss(ref, warped, masks=masks)
        out.update(reg=l_reg, total=l_reg)
        return out
    if stage == "pretrain_cd":
        prob = torch.sigmoid(model.cd(x1, x2))
        l_cd = cd_loss(prob, change)
        out.update(cd=l_cd, total=l_cd)
        return out

    H = sample_batch_transforms(cfg.distortion_spec(), rng, x1.shape[0], size)
    x2d, valid = distort_with(x2, H)
    compress = stage == "end_to_end"
    res = model(x1, x2d, compress=compress, generator=gen)
    a, b = (res["x1_hat"], res["x2_hat"]) if compress else (x1, x2d)
    ref, warped, masks = registration_pyramids(a, b, res["registration"]["H_scale"])
    l_reg = registration_loss(ref, warped, masks=masks)
    l_cd = cd_loss(res["prob"], change, valid)
    rate = res["bpp"].mean() if compress else torch.zeros(())
    out.update(cd=l_cd, reg=l_reg, total=joint_loss(l_cd, l_reg, rate, cfg.alpha, cfg.lam, stage))
    if compress:
        out["bpp"] = rate
    return out


# ----------------------------------------------------------------- validation

@torch.no_grad()
def validate(cfg: StageConfig, model: CADModel, val: ToyDataset) -> dict:
    """Stage-appropriate validation metrics; ``score`` is higher-is-better."""
    model.eval()
    stage = cfg.stage
    if stage == "pretrain_compression":
        x = torch.cat([val.x1, val.x2])
        c = model.codec(x)
        mse = float(torch.mean((c["x_hat"] - x) ** 2))
        bpp = float(c["bpp"].mean())
        return {"mse": mse, "bpp": bpp, "psnr": psnr(x, c["x_hat"], 1.0),
                "score": -(cfg.lam * bpp + mse)}
    if stage == "pretrain_registration":
        vd = val.with_distortions(VAL_DISTORTION_SEED, cfg.distortion_spec())
        H_est = model.registration(val.x1, vd.x2_distorted)["H"]
        target = invert(vd.H_gt)
        size = tuple(val.x1.shape[-2:])
        err = float(corner_error(H_est, target, *size).mean())
        base = float(corner_error(torch.eye(3, dtype=torch.float64).expand_as(target), target, *size).mean())
        return {"corner_error": err, "identity_corner_error": base, "score": -err}
    acc = ConfusionAccumulator()
    metrics = {}
    if stage == "pretrain_cd":
        prob = torch.sigmoid(model.cd(val.x1, val.x2))
        acc.update(prob >= 0.5, val.change > 0.5)
    else:
        vd = val.with_distortions(VAL_DISTORTION_SEED, cfg.distortion_spec())
        compress = stage == "end_to_end"
        res = model(vd.x1, vd.x2_distorted, compress=compress)
        acc.update(res["prob"] >= 0.5, vd.change > 0.5, vd.valid)
        size = tuple(val.x1.shape[-2:])
        metrics["corner_error"] = float(corner_error(res["registration"]["H"], invert(vd.H_gt), *size).mean())
        if compress:
            metrics["bpp"] = float(res["bpp"].mean())
    metrics.update(f1_micro(acc))
    metrics["score"] = metrics["f1"]
    return metrics


# ----------------------------------------------------------------- model setup

TRAINED_MODULES = {
    "pretrain_compression": ("codec",),
    "pretrain_registration": ("registration",),
    "pretrain_cd": ("cd",),
    "joint_reg_cd": ("registration", "cd"),
    "end_to_end": ("codec", "registration", "cd"),
}


def _check_prerequisites(cfg: StageConfig) -> dict:
    found = {}
    for req in PREREQUISITES.get(cfg.stage, ()):
        path = cfg.checkpoint_in.get(req)
        if path is None:
            raise MissingCheckpointError(f"{cfg.stage} needs a {req} checkpoint (checkpoint_in.{req})")
        ckpt = load_checkpoint(path)
        if ckpt.stage != req:
            raise MissingCheckpointError(f"{path} was written by {ckpt.stage}, expected {req}")
        found[req] = (str(path), ckpt)
    return found


def build_stage_model(cfg: StageConfig, inputs: dict, model: CADModel | None = None) -> CADModel:
    if model is None:
        if cfg.model is not None:
            mc = ModelConfig(**cfg.model)
        elif inputs:
            mc = ModelConfig(**next(iter(inputs.values()))[1].model)
        else:
            mc = toy_model_config()
        model = CADModel(mc)
    if cfg.stage == "joint_reg_cd":
        model.load_modules(inputs["pretrain_registration"][1].modules, ("registration",))
        model.load_modules(inputs["pretrain_cd"][1].modules, ("cd",))
    elif cfg.stage == "end_to_end" and inputs:
        model.load_modules(inputs["pretrain_compression"][1].modules, ("codec",))
        model.load_modules(inputs["joint_reg_cd"][1].modules, ("registration", "cd"))
    if cfg.stage in ("pretrain_cd", "joint_reg_cd") and model.cd.stem is None:
        model.cd.attach_stem()
    if cfg.stage == "end_to_end":
        if cfg.input_space == "feature" and model.cd.stem is not None:
            model.cd.detach_stem()
        elif cfg.input_space == "pixel" and model.cd.stem is None:
            model.cd.attach_stem()
    model.codec._frozen = False
    model.codec.config.lambda_index = cfg.lambda_index
    return model


def _param_groups(cfg: StageConfig, model: CADModel) -> list[dict]:
    lrs = cfg.learning_rates
    default = lrs.get("default", 1e-3)
    trained = TRAINED_MODULES[cfg.stage]
    for p in model.parameters():
        p.requires_grad_(False)
    groups = []

    def add(params, key):
        params = list(params)
        for p in params:
            p.requires_grad_(True)
        if params:
            groups.append({"params": params, "lr": lrs.get(key, default), "name": key})

    if "codec" in trained:
        entropy = list(model.codec.factorized.parameters())
        ids = {id(p) for p in entropy}
        add([p for p in model.codec.parameters() if id(p) not in ids], "codec")
        add(entropy, "entropy")
    if "registration" in trained:
        reg = model.registration
        # the pixel stem only runs when no codec taps are available
        skip = set() if cfg.stage in ("pretrain_registration", "joint_reg_cd") else \
            {id(p) for p in reg.pixel_stem.parameters()}
        add([p for p in reg.parameters() if id(p) not in skip], "registration")
    if "cd" in trained:
        add(model.cd.parameters(), "cd")
    return groups


# ----------------------------------------------------------------- loop

@dataclass
class TrainResult:
    stage: str
    model: CADModel
    history: list
    metrics: dict
    best_metrics: dict
    checkpoint: str | None = None
    best_checkpoint: str | None = None
    losses: list = field(default_factory=list)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "numpy": rng.bit_generator.state}


def _make_checkpoint(cfg, model, inputs, rng, metrics, history) -> Checkpoint:
    lineage = []
    for path, ck in inputs.values():
        for item in ck.lineage:
            if item not in lineage:
                lineage.append(item)
    return Checkpoint(stage=cfg.stage, modules={k: {n: t.clone() for n, t in v.items()}
                                                for k, v in model.state_modules().items()},
                      model=model.config.to_dict(), config=cfg.to_dict(), lineage=lineage,
                      rng=_rng_state(rng), metrics=metrics, history=list(history))


def run_stage(cfg: StageConfig, model: CADModel | None = None, data=None, log=None,
              max_steps: int | None = None, pretrained: bool = True) -> TrainResult:
    """Train one stage and write ``last.pt`` / ``best.pt`` under ``cfg.checkpoint_out``.

    ``data`` is ``(train, val)``; by default it comes from ``cfg.data``.
    ``max_steps`` stops early (used for smoke and determinism checks).
    ``pretrained=False`` skips loading upstream checkpoints entirely.
    """
    inputs = _check_prerequisites(cfg) if pretrained else {}
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if data is None:
        train, val, _ = make_splits(cfg.data_config())
    else:
        train, val = data
    model = build_stage_model(cfg, inputs, model)
    groups = _param_groups(cfg, model)
    opt = torch.optim.Adam(groups, weight_decay=cfg.weight_decay)
    step_epoch = cfg.lr_schedule.get("step_epoch")
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=[step_epoch] if step_epoch else [], gamma=cfg.lr_schedule.get("gamma", 0.3))

    out_dir = Path(cfg.checkpoint_out) if cfg.checkpoint_out else None
    last_path = best_path = None
    history, losses = [], []
    best = {"score": -math.inf}
    metrics = {}
    n = len(train)
    steps_per_epoch = cfg.steps_per_epoch or max(1, n // cfg.batch_size)
    bs = min(cfg.batch_size, n)
    step = 0
    frozen = [m for m in ("codec", "registration", "cd") if m not in TRAINED_MODULES[cfg.stage]]

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for name in frozen:
            getattr(model, name).eval()
        t0 = time.perf_counter()
        sums: dict = {}
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            start = b * bs
            idx = order[start:start + bs] if start + bs <= n else rng.choice(n, bs, replace=False)
            idx = torch.as_tensor(idx)
            parts = stage_step(cfg, model, train, idx, rng, gen)
            loss = parts["total"]
            if not torch.isfinite(loss):
                where = f"; last good checkpoint: {last_path}" if last_path else ""
                raise TrainingDivergedError(f"{cfg.stage}: non-finite loss at epoch {epoch}, step {step}{where}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        sched.step()
        row = {"epoch": epoch, "seconds": time.perf_counter() - t0,
               "lr": [g["lr"] for g in opt.param_groups]}
        row.update({k: v / max(1, b + 1) for k, v in sums.items()})
        stop = max_steps is not None and step >= max_steps
        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs or stop:
            metrics = validate(cfg, model, val)
            row["val"] = metrics
            if out_dir is not None:
                last_path = save_checkpoint(_make_checkpoint(cfg, model, inputs, rng, metrics, history + [row]),
                                            out_dir / "last.pt")
            if metrics["score"] > best["score"]:
                best = dict(metrics, epoch=epoch)
                if out_dir is not None:
                    best_path = save_checkpoint(
                        _make_checkpoint(cfg, model, inputs, rng, metrics, history + [row]), out_dir / "best.pt")
        history.append(row)
        if log is not None:
            log(row)
        if stop:
            break

    # lineage records this stage's own output too
    if out_dir is not None:
        for path in (last_path, best_path):
            if path is None:
                continue
            ck = load_checkpoint(path)
            ck.lineage = ck.lineage + [{"stage": cfg.stage, "path": str(path)}]
            save_checkpoint(ck, path)
    model.eval()
    return TrainResult(cfg.stage, model, history, metrics, best,
                       str(last_path) if last_path else None, str(best_path) if best_path else None, losses)


def train_from_scratch_baseline(cfg: StageConfig, model: CADModel | None = None, data=None,
                                log=None) -> TrainResult:
    """End-to-end stage from random initialisation (no pretrained inputs)."""
    if cfg.stage != "end_to_end":
        raise ValueError("the scratch baseline trains the end_to_end objective")
    cfg = replace(cfg, checkpoint_in={})
    if model is None:
        model = CADModel(ModelConfig(**cfg.model) if cfg.model else toy_model_config())
    return run_stage(cfg, model=model, data=data, log=log, pretrained=False)


# ----------------------------------------------------------------- presets

# rate weights of the toy rate/F1 curve, lowest first
TOY_LAMBDAS = (0.01, 0.04, 0.16)

def toy_stage_configs(out_dir, lam: float = 0.01, seed: int = 0, model: dict | None = None,
                      data: dict | None = None, variant: str = "S", lambda_index: int = 0) -> dict:
    """Desk-scale plan: epochs shrunk, learning rates raised, same stage structure."""
    out = Path(out_dir)
    model = model or toy_model_config(variant).to_dict()
    common = {"seed": seed, "model": model, "data": data, "validate_every": 5}
    cfgs = {
        "pretrain_compression": StageConfig(
            "pretrain_compression", epochs=30, batch_size=8, lam=0.01,
            learning_rates={"codec": 1e-3, "entropy": 1e-3},
            checkpoint_out=str(out / "pretrain_compression"), **common),
        "pretrain_registration": StageConfig(
            "pretrain_registration", epochs=300, batch_size=16, learning_rates={"registration": 2e-3},
            lr_schedule={"step_epoch": 210, "gamma": 0.2},
            checkpoint_out=str(out / "pretrain_registration"), **{**common, "validate_every": 10}),
        "pretrain_cd": StageConfig(
            "pretrain_cd", epochs=30, batch_size=8, learning_rates={"cd": 1e-3},
            lr_schedule={"step_epoch": 20, "gamma": 0.3},
            checkpoint_out=str(out / "pretrain_cd"), **common),
    }
    cfgs["joint_reg_cd"] = StageConfig(
        "joint_reg_cd", epochs=20, batch_size=8, alpha=0.3, weight_decay=1e-5,
        learning_rates={"default": 3e-4}, lr_schedule={"step_epoch": 15, "gamma": 0.3},
        checkpoint_in={"pretrain_registration": str(out / "pretrain_registration" / "last.pt"),
                       "pretrain_cd": str(out / "pretrain_cd" / "last.pt")},
        checkpoint_out=str(out / "joint_reg_cd"), **common)
    cfgs["end_to_end"] = StageConfig(
        "end_to_end", epochs=20, batch_size=8, alpha=0.5, lam=lam, lambda_index=lambda_index,
        learning_rates={"default": 3e-4},
        checkpoint_in={"pretrain_compression": str(out / "pretrain_compression" / "last.pt"),
                       "joint_reg_cd": str(out / "joint_reg_cd" / "last.pt")},
        checkpoint_out=str(out / f"end_to_end_lam{lambda_index}"), **common)
    return cfgs


def full_stage_configs(out_dir, lam: float = 0.01, seed: int = 0, variant: str = "L") -> dict:
    """Full-scale schedule (epochs, batch sizes, learning rates) for a large corpus."""
    out = Path(out_dir)
    model = ModelConfig().to_dict() if variant == "L" else ModelConfig(cd={"size_variant": "S"}).to_dict()
    common = {"seed": seed, "model": model, "validate_every": 10}
    return {
        "pretrain_compression": StageConfig(
            "pretrain_compression", epochs=400, batch_size=8, lam=lam,
            learning_rates={"codec": 1e-4, "entropy": 1e-5},
            checkpoint_out=str(out / "pretrain_compression"), **common),
        "pretrain_registration": StageConfig(
            "pretrain_registration", epochs=500, batch_size=24, learning_rates={"registration": 1e-4},
            checkpoint_out=str(out / "pretrain_registration"), **common),
        "pretrain_cd": StageConfig(
            "pretrain_cd", epochs=1500, batch_size=8, learning_rates={"cd": 1e-5},
            lr_schedule={"step_epoch": 1000, "gamma": 0.3},
            checkpoint_out=str(out / "pretrain_cd"), **common),
        "joint_reg_cd": StageConfig(
            "joint_reg_cd", epochs=1500, batch_size=4, alpha=0.3, weight_decay=1e-5,
            learning_rates={"default": 3e-5}, lr_schedule={"step_epoch": 1000, "gamma": 0.3},
            checkpoint_in={"pretrain_registration": str(out / "pretrain_registration" / "last.pt"),
                           "pretrain_cd": str(out / "pretrain_cd" / "last.pt")},
            checkpoint_out=str(out / "joint_reg_cd"), **common),
        "end_to_end": StageConfig(
            "end_to_end", epochs=1000, batch_size=4, alpha=0.5, lam=lam, weight_decay=3e-5,
            learning_rates={"default": 3e-5},
            checkpoint_in={"pretrain_compression": str(out / "pretrain_compression" / "last.pt"),
                           "joint_reg_cd": str(out / "joint_reg_cd" / "last.pt")},
            checkpoint_out=str(out / "end_to_end"), **common),
    }


def run_plan(cfgs: dict, stages=STAGES, log=None) -> dict:
    """Run stages in order; each reads its inputs from the earlier stages' outputs."""
    return {s: run_stage(cfgs[s], log=log) for s in stages if s in cfgs}
