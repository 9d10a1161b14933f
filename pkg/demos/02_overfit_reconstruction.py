"""Fit the reconstruction branch to one static scene and render both training
cameras from the encoded triplane.

The default is a short run; ``--steps 2000`` reaches about 30 dB PSNR
(roughly nine minutes on one core).

    python3 demos/02_overfit_reconstruction.py --steps 300
"""

import argparse
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from trirender.container import write_preview_png
from trirender.data import DEFAULT_BOUNDS, default_rig, random_scene, raytrace_views
from trirender.losses import LossWeights
from trirender.nets import Model, ModelConfig
from trirender.training import PretrainConfig, encoded_grids, pretrain, psnr, render_view, static_sample

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=300)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="demo_out/overfit")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
threadpool_limits(1)

views = raytrace_views(random_scene(np.random.default_rng(args.seed)), default_rig())
model = Model.create(ModelConfig(depth=2), seed=args.seed)
print(f"{sum(t.data.size for _, t in model.store):,} parameters")

# no masking, no augmentation and no future branch: plain overfitting
cfg = PretrainConfig(steps=args.steps, batch_size=1, mask_ratio=0.0, lr=1e-3, view_augmentation=False,
                     se3_augmentation=False, weights=LossWeights(pred=0.0), seed=args.seed)
start = time.perf_counter()
records = pretrain(model, [static_sample(views)], cfg, DEFAULT_BOUNDS,
                   callback=lambda r: r.step % 50 == 0 and print(f"step {r.step:5d}  loss {r.total:.4f}"))
print(f"{time.perf_counter() - start:.0f} s of training")

now, _ = encoded_grids(model, views, 0, DEFAULT_BOUNDS)
for j, v in enumerate(views):
    rgb, _, depth = render_view(model, now, v, DEFAULT_BOUNDS)
    err = np.abs(depth - v.depth)[v.valid]
    print(f"camera {j}: PSNR {psnr(rgb, v.rgb):.2f} dB, median depth error {np.median(err) * 100:.1f} cm")
    write_preview_png(out / f"render{j}.png", rgb)
    write_preview_png(out / f"target{j}.png", v.rgb)
