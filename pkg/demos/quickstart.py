"""A two-minute tour: toy scenes, a few training steps per stage, then a
store-and-detect round trip on one tile.

    python demos/quickstart.py [work_dir]

The models are far from converged; the point is the data flow.  For the
full desk-scale preset use ``demos/toy_pipeline.sh``.
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from cad.codec import RasterImage
from cad.pipeline import CADModel, TileStore, export_change_map, ingest, run_cad
from cad.training import make_splits, run_stage, toy_stage_configs

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cad-quickstart-"))
data = {"num_train": 32, "num_val": 8, "num_test": 8}
cfgs = toy_stage_configs(work / "ckpt", data=data)

for stage in ("pretrain_compression", "pretrain_registration", "pretrain_cd", "joint_reg_cd", "end_to_end"):
    res = run_stage(replace(cfgs[stage], epochs=2, validate_every=1), max_steps=20)
    print(f"{stage:<22} loss {res.losses[-1]:.4f}  ->  {res.checkpoint}")

model = CADModel.from_checkpoint(cfgs["end_to_end"].checkpoint_out + "/last.pt")
test = make_splits(cfgs["end_to_end"].data_config())[2]

store = TileStore(work / "store")
key = ingest(store, model.codec, RasterImage(test.x1[0], "demo-tile", 1))
print(f"stored {key}: {store.meta(key)['bpp']:.3f} bpp")

change, report = run_cad(store, key, RasterImage(test.x2_distorted[0], "demo-tile", 2), model)
paths = export_change_map(change, work / "out")
print(f"changed fraction {float(change.mask.float().mean()):.3f}; "
      f"{report['timings']['total'] * 1e3:.1f} ms end to end")
print(f"mask: {paths['mask_png']}")
