"""Train both branches on one scripted pick-place demonstration. The future
branch turns the current observation into a triplane of the next keyframe,
so rendering it should show the object where the gripper carries it.

    python3 demos/03_future_prediction.py --steps 400
"""

import argparse
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from trirender.container import write_preview_png
from trirender.data import DEFAULT_BOUNDS, make_pick_place_demo, random_scene
from trirender.nets import Model, ModelConfig
from trirender.training import PretrainConfig, build_samples, encoded_grids, pretrain, psnr, render_view

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=400)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="demo_out/future")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
threadpool_limits(1)

rng = np.random.default_rng(args.seed)
demo = make_pick_place_demo(random_scene(rng), rng)
samples = build_samples([demo])
for s in samples:
    _, a, b = s.index
    moved = np.linalg.norm(demo.frames[b].object_position - demo.frames[a].object_position)
    print(f"frames {a:2d} -> {b:2d}: object moves {moved * 100:4.1f} cm, gripper {s.action.gripper}")

model = Model.create(ModelConfig(depth=2), seed=args.seed)
cfg = PretrainConfig(steps=args.steps, batch_size=1, lr=1e-3, view_augmentation=False, se3_augmentation=False,
                     seed=args.seed)
pretrain(model, samples, cfg, DEFAULT_BOUNDS,
         callback=lambda r: r.step % 50 == 0 and print(f"step {r.step:5d}  loss {r.total:.4f}"))

# the pair where the object travels furthest
s = max(samples, key=lambda s: np.linalg.norm(demo.frames[s.index[2]].object_position
                                              - demo.frames[s.index[1]].object_position))
now, future = encoded_grids(model, s.current, s.task_id, DEFAULT_BOUNDS)
for j, v in enumerate(s.future):
    fut_rgb = render_view(model, future, v, DEFAULT_BOUNDS)[0]
    now_rgb = render_view(model, now, v, DEFAULT_BOUNDS)[0]
    print(f"camera {j}: future branch {psnr(fut_rgb, v.rgb):.2f} dB,"
          f" current triplane {psnr(now_rgb, v.rgb):.2f} dB against the next keyframe")
    write_preview_png(out / f"cam{j}_future_branch.png", fut_rgb)
    write_preview_png(out / f"cam{j}_current_branch.png", now_rgb)
    write_preview_png(out / f"cam{j}_next_keyframe.png", v.rgb)
