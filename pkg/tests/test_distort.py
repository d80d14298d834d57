import json

import numpy as np
import pytest
import torch

from cad.distort import (
    DistortionSpec,
    ToyDatasetSpec,
    apply_distortion,
    corner_displacement_bound,
    load_dataset,
    make_toy_dataset,
    sample_transform,
    save_dataset,
)
from cad.registration import Homography, invert, warp
from cad.registration.homography import corners, transform_points


def test_zero_bounds_give_identity():
    H = sample_transform(DistortionSpec.none(), np.random.default_rng(0))
    assert np.array_equal(H.matrix, np.eye(3))


def test_negative_bound_rejected():
    with pytest.raises(ValueError):
        DistortionSpec(max_rotation_deg=-1.0)


def test_seeded_determinism():
    spec = DistortionSpec()
    a = sample_transform(spec, np.random.default_rng(42))
    b = sample_transform(spec, np.random.default_rng(42))
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, sample_transform(spec, np.random.default_rng(43)).matrix)


def test_corner_displacements_within_bound():
    spec = DistortionSpec()
    rng = np.random.default_rng(0)
    c = corners(64, 64)
    bound = corner_displacement_bound(spec, (64, 64))
    worst = 0.0
    for _ in range(10_000):
        H = sample_transform(spec, rng)
        moved = transform_points(H.tensor(), c)
        worst = max(worst, float((moved - c[:, :2]).norm(dim=1).max()))
        assert abs(np.linalg.det(H.matrix)) >= 1e-6
    assert worst <= bound
    # a bound far above anything sampled would make the check vacuous
    assert worst >= 0.5 * bound


def test_identity_distortion_unchanged():
    img = torch.rand(3, 16, 16)
    out, mask = apply_distortion(img, Homography.identity())
    assert torch.equal(out, img) and mask.all()


def test_inverse_warp_round_trip():
    spec = DistortionSpec()
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=8, seed=3))
    img = torch.nn.functional.avg_pool2d(ds.x1, 3, 1, 1)  # mild smoothing keeps bilinear error small
    rng = np.random.default_rng(1)
    for i in range(8):
        H = sample_transform(spec, rng)
        fwd, m1 = apply_distortion(img[i], H)
        back, m2 = apply_distortion(fwd, H.inverse())
        both = m2 & warp(m1.float(), H.inverse()).ge(1 - 1e-6)
        assert both.sum() > 0
        err = (back - img[i]).abs()[both.expand_as(back)]
        assert float(err.mean()) <= 2e-2


def test_mask_fraction_falls_with_translation():
    rng_fracs = []
    for frac in (0.0, 0.05, 0.1, 0.2, 0.3):
        spec = DistortionSpec(max_translation_frac=frac, max_rotation_deg=0, max_scale_delta=0,
                              max_shear_deg=0, max_perspective=0)
        rng = np.random.default_rng(0)
        total = 0.0
        for _ in range(200):
            _, m = apply_distortion(torch.ones(1, 32, 32), sample_transform(spec, rng, (32, 32)))
            total += float(m.float().mean())
        rng_fracs.append(total / 200)
    assert all(a > b for a, b in zip(rng_fracs, rng_fracs[1:]))
    assert rng_fracs[0] == 1.0


def test_change_rate_zero_gives_empty_masks():
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=6, change_rate=0.0))
    assert float(ds.change.sum()) == 0.0


def test_single_removed_object_footprint():
    spec = ToyDatasetSpec(num_pairs=4, min_objects=1, max_objects=1, change_rate=1.0, add_fraction=0.0,
                          noise_std=0.0)
    ds = make_toy_dataset(spec)
    for i in range(4):
        differs = (ds.x1[i] != ds.x2[i]).any(0)
        assert torch.equal(ds.change[i, 0].bool(), differs)
        assert differs.sum() > 0


def test_change_mask_covers_all_differences():
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=8, noise_std=0.0, seed=5))
    differs = (ds.x1 != ds.x2).any(1, keepdim=True)
    assert not (differs & ~ds.change.bool()).any()


def test_dataset_reproducible():
    a = make_toy_dataset(ToyDatasetSpec(num_pairs=5, seed=9))
    b = make_toy_dataset(ToyDatasetSpec(num_pairs=5, seed=9))
    for name in ("x1", "x2", "change", "x2_distorted", "H_gt", "valid"):
        assert torch.equal(getattr(a, name), getattr(b, name))
    c = make_toy_dataset(ToyDatasetSpec(num_pairs=5, seed=10))
    assert not torch.equal(a.x1, c.x1)


def test_ground_truth_consistency():
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=6, seed=2))
    x2 = torch.nn.functional.avg_pool2d(ds.x2, 3, 1, 1)
    for i in range(6):
        dist, m1 = apply_distortion(x2[i], ds.H_gt[i])
        back, m2 = apply_distortion(dist, invert(ds.H_gt[i]))
        both = m2 & warp(m1.float(), invert(ds.H_gt[i])).ge(1 - 1e-6)
        assert float((back - x2[i]).abs()[both.expand_as(back)].mean()) <= 2e-2
    # the stored distorted image is exactly the warp of the clean t2 render
    assert torch.equal(ds.x2_distorted[0], warp(ds.x2[0], ds.H_gt[0]))


def test_with_distortions_reseeds_only_geometry():
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=4))
    other = ds.with_distortions(7)
    assert torch.equal(other.x1, ds.x1) and torch.equal(other.change, ds.change)
    assert not torch.equal(other.H_gt, ds.H_gt)
    assert torch.equal(other.H_gt, ds.with_distortions(7).H_gt)


def test_save_load_round_trip(tmp_path):
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=3, seed=4))
    save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["pairs"][0]["H_gt"]) == 9
    back = load_dataset(tmp_path)
    assert torch.equal(back.x1, ds.x1) and torch.equal(back.x2, ds.x2)
    assert torch.equal(back.change, ds.change)
    assert torch.equal(back.H_gt, ds.H_gt)
    assert torch.equal(back.x2_distorted, ds.x2_distorted)
