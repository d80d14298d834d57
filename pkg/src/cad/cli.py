"""``cad`` command line: ingest, detect, train, eval, curve, audit-swap, bench.

Every verb writes ``run_manifest.json`` into its output directory and prints
a short summary.  Failures print the error, still write a manifest with
``"status": "error"``, and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from cad import __version__
from cad.errors import CADError

EXIT_ERROR = 2


def _load_image(path, tile_id: str, timestamp: int):
    from cad.codec import RasterImage

    a = np.asarray(Image.open(path).convert("RGB"))
    return RasterImage.from_uint8(a, tile_id=tile_id, timestamp=timestamp)


def _data_config(args):
    from cad.training import DataConfig

    if getattr(args, "data", None):
        return DataConfig(**(yaml.safe_load(Path(args.data).read_text()) or {}))
    return DataConfig()


def _test_split(args):
    from cad.distort import load_dataset
    from cad.training import make_splits

    if getattr(args, "dataset", None):
        return load_dataset(args.dataset)
    return make_splits(_data_config(args))[2]


def _write_rows(path: Path, rows: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


# ----------------------------------------------------------------- verbs

def cmd_ingest(args, out: Path) -> tuple[dict, str]:
    from cad.pipeline import CADModel, TileStore, ingest

    model = CADModel.from_checkpoint(args.checkpoint)
    store = TileStore(args.store, capacity_bytes=args.capacity)
    image = _load_image(args.image, args.tile_id, args.timestamp)
    key = ingest(store, model.codec, image, geo=args.geo)
    meta = store.meta(key)
    return {"key": str(key), "metadata": meta}, f"stored {key}: {meta['num_bytes']} B, {meta['bpp']:.4f} bpp"


def cmd_detect(args, out: Path) -> tuple[dict, str]:
    from cad.pipeline import CADModel, PipelineConfig, TileStore, export_change_map, run_cad

    model = CADModel.from_checkpoint(args.checkpoint)
    store = TileStore(args.store)
    image = _load_image(args.image, args.tile_id, args.timestamp)
    cfg = PipelineConfig(input_space=args.input_space or model.input_space, threshold=args.threshold,
                         checkpoint=args.checkpoint, reingest=not args.no_reingest)
    change, report = run_cad(store, args.key, image, model, cfg)
    files = export_change_map(change, out)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    frac = float(change.mask.float().mean())
    t = report["timings"]
    summary = (f"changed fraction {frac:.4f}; bpp t1 {report['bpp_t1']:.4f}, t2 {report['bpp_t2']:.4f}; "
               f"{t['total'] * 1e3:.1f} ms (codec {t['codec'] * 1e3:.1f}, reg {t['registration'] * 1e3:.1f}, "
               f"cd {t['cd'] * 1e3:.1f})")
    return {"report": report, "outputs": files, "changed_fraction": frac}, summary


def cmd_train(args, out: Path) -> tuple[dict, str]:
    from cad.training import StageConfig, run_stage

    cfg = StageConfig.from_yaml(args.config)
    if cfg.stage != args.stage:
        raise ValueError(f"--stage {args.stage} does not match config stage {cfg.stage}")
    if cfg.checkpoint_out is None:
        cfg.checkpoint_out = str(out / cfg.stage)
    log_path = out / "train_log.jsonl"
    with log_path.open("w") as fh:
        def log(row):
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            val = row.get("val")
            msg = f"epoch {row['epoch']}: loss {row.get('total', float('nan')):.5f}"
            if val:
                msg += " | " + ", ".join(f"{k} {v:.4f}" for k, v in val.items() if isinstance(v, float))
            print(msg, flush=True)

        res = run_stage(cfg, log=log)
    summary = f"{cfg.stage}: {len(res.history)} epochs; last {res.checkpoint}; best {res.best_checkpoint}"
    return {"stage": cfg.stage, "checkpoint": res.checkpoint, "best_checkpoint": res.best_checkpoint,
            "metrics": res.metrics, "best_metrics": res.best_metrics, "log": str(log_path)}, summary


def cmd_eval(args, out: Path) -> tuple[dict, str]:
    from cad.distort import DistortionSpec
    from cad.eval import evaluate_protocol
    from cad.pipeline import CADModel

    model = CADModel.from_checkpoint(args.checkpoint)
    test = _test_split(args)
    compress = not args.no_compress
    res = evaluate_protocol(model, test, seeds=range(args.seeds), compress=compress,
                            distortion=DistortionSpec(**json.loads(args.distortion)) if args.distortion else None,
                            threshold=args.threshold)
    table = out / "per_seed.csv"
    _write_rows(table, res.per_seed)
    result = res.to_dict()
    summary = f"F1 {res.f1_mean:.4f} ± {res.f1_std:.4f} over {len(res.per_seed)} seeds"
    if compress:
        summary += f"; bpp {res.bpp_mean:.4f} ± {res.bpp_std:.4f}"
    result["per_seed_csv"] = str(table)
    return result, summary


def cmd_curve(args, out: Path) -> tuple[dict, str]:
    from dataclasses import asdict

    from cad.checkpoint import load_checkpoint
    from cad.eval import rate_f1_curve

    paths = sorted(Path(args.checkpoints).glob(args.pattern))
    e2e, ref = [], args.reference
    for p in paths:
        stage = load_checkpoint(p).stage
        if stage == "end_to_end":
            e2e.append(p)
        elif stage == "joint_reg_cd" and ref is None:
            ref = str(p)
    if not e2e:
        raise CADError(f"no end_to_end checkpoints matching {args.pattern} under {args.checkpoints}")
    points, reference = rate_f1_curve(e2e, _test_split(args), seeds=range(args.seeds), reference=ref, out_dir=out)
    lines = [f"lam {p.lam:g}: bpp {p.bpp_mean:.4f} ± {p.bpp_std:.4f}, F1 {p.f1_mean:.4f} ± {p.f1_std:.4f}"
             for p in points]
    if reference:
        lines.append(f"no compression: F1 {reference['f1_mean']:.4f} ± {reference['f1_std']:.4f}")
    return {"points": [asdict(p) for p in points], "reference": reference, "checkpoints": [str(p) for p in e2e],
            "csv": str(out / "curve.csv"), "plot": str(out / "curve.png")}, "\n".join(lines)


def cmd_audit_swap(args, out: Path) -> tuple[dict, str]:
    from dataclasses import replace

    from cad.changedetect import TieCD, TieCDConfig
    from cad.distort import make_toy_dataset
    from cad.eval import ConcatUNet, order_swap_audit, train_cd_pairs
    from cad.pipeline import CADModel
    from cad.training import DataConfig

    dc = _data_config(args)
    spec = replace(dc.dataset_spec(), add_fraction=1.0, num_pairs=args.pairs, seed=args.seed)
    ds = make_toy_dataset(spec)
    n_train = args.pairs * 3 // 4
    train, test = ds.split(n_train)
    if args.checkpoint:
        model = CADModel.from_checkpoint(args.checkpoint)
        cd = model.cd
        if cd.stem is None:
            codec = model.codec

            class FeatureCD(torch.nn.Module):
                def forward(self, a, b):
                    n = a.shape[0]
                    tap = codec(torch.cat([a, b]))["tap"]
                    return cd(tap[:n], tap[n:])

            tiecd = FeatureCD()
        else:
            tiecd = cd
    else:
        tiecd = TieCD(TieCDConfig(in_channels=16, base_width=16, size_variant="S", input_space="pixel"))
        train_cd_pairs(tiecd, train, steps=args.steps, seed=args.seed)
    baseline = ConcatUNet()
    train_cd_pairs(baseline, train, steps=args.steps, seed=args.seed)
    tie = order_swap_audit(tiecd, test)
    base = order_swap_audit(baseline, test)
    result = {"tiecd": tie, "concat_baseline": base,
              "tiecd_identical": tie["f1_forward"] == tie["f1_swapped"]}
    summary = (f"TieCD F1 forward {tie['f1_forward']:.4f} / swapped {tie['f1_swapped']:.4f}; "
               f"concat baseline forward {base['f1_forward']:.4f} / swapped {base['f1_swapped']:.4f}")
    return result, summary


def cmd_bench(args, out: Path) -> tuple[dict, str]:
    from cad.eval import count_params_flops
    from cad.pipeline import CADModel, ModelConfig, full_model_config, throughput_benchmark, toy_model_config

    results = {}
    lines = []
    for variant in args.variants:
        if args.checkpoint:
            model = CADModel.from_checkpoint(args.checkpoint)
        else:
            mc = full_model_config(variant) if args.scale == "full" else toy_model_config(variant)
            model = CADModel(ModelConfig(**mc.to_dict()))
            model.eval()
        tp = throughput_benchmark(model, args.size, args.iters)
        cx = count_params_flops(model, (3, args.size, args.size))
        results[variant] = {"throughput": tp, "complexity": cx}
        lines.append(f"TieCD-{variant}: {tp['pixels_per_second']:.0f} px/s, "
                     f"{cx['params'] / 1e6:.3f}M params, {cx['flops'] / 1e9:.3f} GFLOPs @ {args.size}px")
        if args.checkpoint:
            break
    return results, "\n".join(lines)


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cad", description="Compression, registration and change detection.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", help="output directory (default: cad_runs/<verb>-<time>)")
        sp.set_defaults(fn=fn)
        return sp

    sp = verb("ingest", cmd_ingest, "compress an image into the tile store")
    sp.add_argument("--store", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--tile-id", required=True)
    sp.add_argument("--timestamp", type=int, required=True)
    sp.add_argument("--geo", default="")
    sp.add_argument("--capacity", type=int, default=None, help="store capacity in bytes")

    sp = verb("detect", cmd_detect, "detect changes between a stored tile and a new image")
    sp.add_argument("--store", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--key", required=True, help="<tile_id>@<timestamp> of the stored t1 tile")
    sp.add_argument("--image", required=True)
    sp.add_argument("--tile-id", required=True)
    sp.add_argument("--timestamp", type=int, required=True)
    sp.add_argument("--input-space", choices=("feature", "pixel"))
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--no-reingest", action="store_true")

    sp = verb("train", cmd_train, "run one training stage")
    sp.add_argument("--stage", required=True,
                    choices=("pretrain_compression", "pretrain_registration", "pretrain_cd",
                             "joint_reg_cd", "end_to_end"))
    sp.add_argument("--config", required=True, help="YAML stage config")

    sp = verb("eval", cmd_eval, "multi-seed distortion evaluation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--data", help="YAML data config (toy corpus spec and split sizes)")
    sp.add_argument("--dataset", help="saved dataset directory (used whole as test set)")
    sp.add_argument("--distortion", help="JSON distortion bounds overriding the dataset's")
    sp.add_argument("--no-compress", action="store_true", help="skip the codec (registration + CD only)")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = verb("curve", cmd_curve, "rate/F1 curve over per-lambda checkpoints")
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--pattern", default="**/best.pt")
    sp.add_argument("--reference", help="joint checkpoint for the no-compression line")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--data")
    sp.add_argument("--dataset")

    sp = verb("audit-swap", cmd_audit_swap, "F1 under both input orders, TieCD vs a concat baseline")
    sp.add_argument("--checkpoint", help="model whose TieCD is audited (default: train a small one)")
    sp.add_argument("--data")
    sp.add_argument("--pairs", type=int, default=128)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)

    sp = verb("bench", cmd_bench, "throughput and parameter/FLOP counts")
    sp.add_argument("--checkpoint")
    sp.add_argument("--scale", choices=("toy", "full"), default="toy")
    sp.add_argument("--variants", nargs="+", default=["L", "S"], choices=("L", "S"))
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--iters", type=int, default=5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else Path("cad_runs") / f"{args.verb}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"verb": args.verb, "argv": list(sys.argv[1:] if argv is None else argv),
                "version": __version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    t0 = time.perf_counter()
    code = 0
    try:
        result, summary = args.fn(args, out)
        manifest.update(status="ok", result=result)
        print(summary)
    except (CADError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        manifest.update(status="error", error=f"{type(exc).__name__}: {exc}",
                        traceback=traceback.format_exc())
        print(f"cad {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    manifest["seconds"] = time.perf_counter() - t0
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=str))
    print(f"manifest: {out / 'run_manifest.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
