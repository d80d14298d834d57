import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from cad.checkpoint import Checkpoint, save_checkpoint
from cad.distort import DistortionSpec, ToyDatasetSpec, make_toy_dataset
from cad.eval import (
    PSNR_CAP_DB,
    ConcatUNet,
    ConfusionAccumulator,
    CurvePoint,
    count_params_flops,
    evaluate_protocol,
    f1_micro,
    order_swap_audit,
    psnr,
    psnr_for_file,
    rate_f1_curve,
    write_curve,
)
from cad.pipeline import CADModel, toy_model_config
from oracles import brute_force_f1, hand_f1


def acc_of(tp, fp, fn, tn=0):
    return ConfusionAccumulator(tp, fp, fn, tn)


# ------------------------------------------------------------------ F1

def test_f1_examples():
    r = f1_micro(acc_of(1, 1, 1))
    assert r == {"precision": 0.5, "recall": 0.5, "f1": 0.5}
    r = f1_micro(acc_of(8, 2, 4))
    assert r["precision"] == pytest.approx(0.8)
    assert r["recall"] == pytest.approx(2 / 3)
    assert r["f1"] == pytest.approx(8 / 11)
    assert r["f1"] == pytest.approx(hand_f1(8, 2, 4)[2])
    assert f1_micro(acc_of(5, 0, 0, 7))["f1"] == 1.0


def test_f1_degenerate_cases():
    assert f1_micro(acc_of(0, 0, 0, 10))["f1"] == 1.0
    assert f1_micro(acc_of(0, 3, 0))["f1"] == 0.0
    assert f1_micro(acc_of(0, 0, 2))["f1"] == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5), st.floats(0.0, 1.0))
def test_micro_f1_matches_brute_force(seed, n_images, density):
    rng = np.random.default_rng(seed)
    preds = rng.uniform(size=(n_images, 6, 7)) < density
    gts = rng.uniform(size=(n_images, 6, 7)) < 0.3
    acc = ConfusionAccumulator()
    for p, g in zip(preds, gts):
        acc.update(torch.from_numpy(p), torch.from_numpy(g))
    assert acc.total == preds.size
    assert f1_micro(acc)["f1"] == pytest.approx(brute_force_f1(preds, gts), abs=1e-12)


def test_accumulator_mask_and_merge():
    pred = torch.tensor([[1, 1, 0, 0]])
    gt = torch.tensor([[1, 0, 1, 0]])
    a = ConfusionAccumulator().update(pred, gt, torch.tensor([[1, 1, 1, 0]]))
    assert (a.tp, a.fp, a.fn, a.tn) == (1, 1, 1, 0)
    b = ConfusionAccumulator().update(pred, gt)
    m = a.merge(b)
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 2, 2, 1)
    with pytest.raises(ValueError):
        a.update(torch.zeros(2), torch.zeros(3))


# ------------------------------------------------------------------ PSNR

def test_psnr_examples():
    x = torch.zeros(10)
    assert psnr(x, torch.full((10,), 255.0)) == pytest.approx(0.0)
    assert psnr(x, x) == math.inf
    assert psnr_for_file(psnr(x, x)) == PSNR_CAP_DB
    err = math.sqrt(65.025)
    assert psnr(x, torch.full((10,), err, dtype=torch.float64)) == pytest.approx(30.0, abs=1e-9)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (3, 32, 32))
    values = [psnr(img, img + rng.normal(0, s, img.shape)) for s in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(values, values[1:]))


# ------------------------------------------------------------------ complexity

def test_flop_examples():
    r = count_params_flops(nn.Conv2d(3, 8, 1), (3, 4, 4))
    assert r["params"] == 32
    r = count_params_flops(nn.Conv2d(4, 4, 3, padding=1), (4, 8, 8))
    assert r["params"] == 148
    assert r["flops"] == 2 * (3 * 3 * 4) * 4 * 64 == 18_432


def test_flop_linear_and_grouped():
    assert count_params_flops(nn.Linear(5, 7), (5,))["flops"] == 2 * 35
    r = count_params_flops(nn.Conv2d(4, 4, 3, padding=1, groups=4, bias=False), (4, 8, 8))
    assert r["params"] == 36 and r["flops"] == 2 * 9 * 4 * 64


def test_full_model_counts():
    m = CADModel(toy_model_config())
    r = count_params_flops(m, (3, 64, 64))
    assert r["params"] == sum(p.numel() for p in m.parameters())
    assert r["flops"] > 0


# ------------------------------------------------------------------ protocol

@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = CADModel(toy_model_config()).eval()
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=4, seed=21))
    return model, ds


def test_zero_severity_has_zero_std(tiny):
    model, ds = tiny
    r = evaluate_protocol(model, ds, seeds=range(3), distortion=DistortionSpec.none(), rate="estimate")
    assert r.f1_std == 0.0 and r.bpp_std == 0.0
    assert len({row["f1"] for row in r.per_seed}) == 1


def test_protocol_deterministic(tiny):
    model, ds = tiny
    a = evaluate_protocol(model, ds, seeds=[0, 5])
    b = evaluate_protocol(model, ds, seeds=[0, 5])
    assert a.to_dict() == b.to_dict()
    assert [row["seed"] for row in a.per_seed] == [0, 5]
    assert a.f1_std == pytest.approx(float(np.std([row["f1"] for row in a.per_seed])))


def test_curve_files(tmp_path, tiny):
    model, ds = tiny
    paths = []
    for i, lam in enumerate((0.05, 0.01)):
        cfg = model.config.to_dict()
        cfg["codec"]["lambda_index"] = i
        ck = Checkpoint("end_to_end", model.state_modules(), cfg, config={"lam": lam})
        paths.append(save_checkpoint(ck, tmp_path / f"e2e{i}.pt"))
    joint = CADModel(toy_model_config())
    joint.cd.attach_stem()  # the joint stage detects on pixels
    ref = save_checkpoint(Checkpoint("joint_reg_cd", joint.state_modules(), joint.config.to_dict()),
                          tmp_path / "joint.pt")
    points, refres = rate_f1_curve(paths, ds, seeds=[0, 1], reference=ref, out_dir=tmp_path / "curve")
    assert [p.lam for p in points] == [0.01, 0.05]
    assert all(p.runs == 2 for p in points)
    assert refres["runs"] == 2
    rows = list(csv.DictReader((tmp_path / "curve" / "curve.csv").open()))
    assert len(rows) == 2
    assert (tmp_path / "curve" / "curve.png").stat().st_size > 0


def test_write_curve_rows(tmp_path):
    pts = [CurvePoint(i, 0.01 * i, 1.0 / (i + 1), 0.1, 0.7, 0.02, 100) for i in range(4)]
    out = write_curve(pts, {"f1_mean": 0.8, "f1_std": 0.01, "runs": 100}, tmp_path)
    assert len(list(csv.DictReader(open(out["csv"])))) == 4


# ------------------------------------------------------------------ order swap

def test_tiecd_audit_identical(tiny):
    _, ds = tiny
    pixel = CADModel(toy_model_config()).cd
    pixel.attach_stem()
    r = order_swap_audit(pixel, ds)
    assert r["f1_forward"] == r["f1_swapped"]


def test_concat_baseline_is_order_sensitive():
    torch.manual_seed(0)
    m = ConcatUNet().eval()
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert float((m(a, b) - m(b, a)).abs().max()) > 1e-3
