import json
import shutil
import subprocess

import numpy as np
import pytest
import yaml
from PIL import Image

from cad.cli import EXIT_ERROR, main
from cad.training import toy_stage_configs

TINY_DATA = {"num_train": 8, "num_val": 4, "num_test": 4, "toy": {"seed": 5}}


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    manifest = json.loads((out / "run_manifest.json").read_text())
    return code, manifest, out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """All five stages at one or two steps each, driven through ``cad train``."""
    root = tmp_path_factory.mktemp("cli")
    cfgs = toy_stage_configs(root / "ckpt", data=TINY_DATA)
    extra = {"end_to_end_b": ("end_to_end", dict(lam=0.05, lambda_index=1,
                                                 checkpoint_out=str(root / "ckpt" / "end_to_end_lam1")))}
    for name, cfg in list(cfgs.items()):
        d = cfg.to_dict()
        d.update(epochs=1, steps_per_epoch=1, batch_size=2)
        (root / f"{name}.yaml").write_text(yaml.safe_dump(d))
    for name, (stage, over) in extra.items():
        d = yaml.safe_load((root / f"{stage}.yaml").read_text())
        d.update(over)
        (root / f"{name}.yaml").write_text(yaml.safe_dump(d))
    for name in ("pretrain_compression", "pretrain_registration", "pretrain_cd", "joint_reg_cd",
                 "end_to_end", "end_to_end_b"):
        stage = extra.get(name, (name,))[0]
        code, manifest, _ = run(root, f"train_{name}", "train", "--stage", stage,
                                "--config", str(root / f"{name}.yaml"))
        assert code == 0, manifest.get("error")
    (root / "data.yaml").write_text(yaml.safe_dump(TINY_DATA))
    return root


def save_png(path, seed):
    a = np.random.default_rng(seed).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    Image.fromarray(a).save(path)
    return str(path)


def test_console_script_installed():
    exe = shutil.which("cad")
    assert exe is not None
    r = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for verb in ("ingest", "detect", "train", "eval", "curve", "audit-swap", "bench"):
        assert verb in r.stdout


def test_train_manifest(trained):
    m = json.loads((trained / "train_end_to_end" / "run_manifest.json").read_text())
    assert m["status"] == "ok" and m["result"]["stage"] == "end_to_end"
    assert (trained / "train_end_to_end" / "train_log.jsonl").read_text().strip()


def test_train_stage_mismatch(tmp_path, trained):
    code, m, _ = run(tmp_path, "bad", "train", "--stage", "pretrain_cd",
                     "--config", str(trained / "pretrain_compression.yaml"))
    assert code == EXIT_ERROR and m["status"] == "error"


def test_ingest_and_detect(tmp_path, trained, capsys):
    ckpt = str(trained / "ckpt" / "end_to_end_lam0" / "last.pt")
    store = str(tmp_path / "store")
    code, m, _ = run(tmp_path, "ingest", "ingest", "--store", store, "--checkpoint", ckpt,
                     "--image", save_png(tmp_path / "a.png", 0), "--tile-id", "T", "--timestamp", "1")
    assert code == 0 and m["result"]["key"] == "T@1"
    code, m, out = run(tmp_path, "detect", "detect", "--store", store, "--checkpoint", ckpt, "--key", "T@1",
                       "--image", save_png(tmp_path / "b.png", 1), "--tile-id", "T", "--timestamp", "2")
    assert code == 0, m.get("error")
    assert (out / "change_mask.png").exists() and (out / "report.json").exists()
    assert "changed fraction" in capsys.readouterr().out
    code, m, _ = run(tmp_path, "detect_missing", "detect", "--store", store, "--checkpoint", ckpt,
                     "--key", "T@99", "--image", str(tmp_path / "b.png"), "--tile-id", "T", "--timestamp", "3")
    assert code == EXIT_ERROR and "KeyNotFound" in m["error"]


def test_eval_twice_identical(tmp_path, trained):
    ckpt = str(trained / "ckpt" / "end_to_end_lam0" / "last.pt")
    args = ["eval", "--checkpoint", ckpt, "--seeds", "3", "--data", str(trained / "data.yaml")]
    c1, m1, o1 = run(tmp_path, "e1", *args)
    c2, m2, o2 = run(tmp_path, "e2", *args)
    assert c1 == c2 == 0
    assert (o1 / "per_seed.csv").read_text() == (o2 / "per_seed.csv").read_text()
    assert m1["result"]["f1_mean"] == m2["result"]["f1_mean"]
    assert len(m1["result"]["per_seed"]) == 3


def test_curve(tmp_path, trained):
    code, m, out = run(tmp_path, "curve", "curve", "--checkpoints", str(trained / "ckpt"), "--pattern", "**/last.pt",
                       "--seeds", "2", "--data", str(trained / "data.yaml"))
    assert code == 0, m.get("error")
    assert len(m["result"]["points"]) == 2
    assert m["result"]["reference"] is not None
    assert (out / "curve.csv").exists() and (out / "curve.png").exists()


def test_curve_without_checkpoints(tmp_path):
    code, m, _ = run(tmp_path, "curve", "curve", "--checkpoints", str(tmp_path))
    assert code == EXIT_ERROR


def test_audit_swap(tmp_path, trained):
    code, m, _ = run(tmp_path, "audit", "audit-swap", "--pairs", "8", "--steps", "2", "--data",
                     str(trained / "data.yaml"))
    assert code == 0, m.get("error")
    assert m["result"]["tiecd_identical"] is True


def test_bench(tmp_path):
    code, m, _ = run(tmp_path, "bench", "bench", "--iters", "1", "--variants", "S")
    assert code == 0
    assert m["result"]["S"]["throughput"]["pixels_per_second"] > 0
    assert m["result"]["S"]["complexity"]["params"] > 0


def test_missing_checkpoint_exit_code(tmp_path):
    code, m, _ = run(tmp_path, "eval", "eval", "--checkpoint", str(tmp_path / "nope.pt"), "--seeds", "1")
    assert code == EXIT_ERROR and m["status"] == "error"
