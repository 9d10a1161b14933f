"""From demonstrations to actions: keyframes found from joint speeds, a short
finetune of the heatmap policy, and decoded next-keyframe actions.

    python3 demos/04_keyframe_policy.py --demos 3 --steps 300
"""

import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from trirender.data import DEFAULT_BOUNDS, discover_keyframes, make_pick_place_demo, random_scene
from trirender.nets import Model, ModelConfig
from trirender.policy import infer_action
from trirender.training import FinetuneConfig, build_samples, evaluate_policy, finetune

parser = argparse.ArgumentParser()
parser.add_argument("--demos", type=int, default=3)
parser.add_argument("--steps", type=int, default=300)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
threadpool_limits(1)

rng = np.random.default_rng(args.seed)
demos = [make_pick_place_demo(random_scene(rng), rng) for _ in range(args.demos)]
for d in demos:
    keys = discover_keyframes(d).indices
    print(f"{len(d)} frames, scripted waypoints {list(d.waypoints)}, discovered keyframes {list(keys)}")

samples = build_samples(demos)
model = Model.create(ModelConfig(depth=2), seed=args.seed)
# one-hot heatmap targets so the loss can approach zero on a small training set
cfg = FinetuneConfig(steps=args.steps, batch_size=1, lr=1e-3, heatmap_sigma=0.0, se3_augmentation=False,
                     seed=args.seed)
finetune(model, samples, cfg, DEFAULT_BOUNDS,
         callback=lambda r: r.step % 50 == 0 and print(f"step {r.step:5d}  loss {r.total:.3f}  "
                                                       + "  ".join(f"{k} {v:.3f}" for k, v in r.terms.items())))

m = evaluate_policy(model, samples, DEFAULT_BOUNDS)
print(f"training set: translation voxel {m.translation_accuracy:.0%}, gripper {m.gripper_accuracy:.0%},"
      f" rotation bins {m.rotation_accuracy:.0%} over {m.n} samples")
for s in samples[: len(samples) // args.demos]:
    a = infer_action(model, s.current, s.task_id, DEFAULT_BOUNDS)
    print(f"frame {s.index[1]:2d}: predicted {np.round(a.translation, 3)} gripper {a.gripper}"
          f"  demonstrated {np.round(s.action.translation, 3)} gripper {s.action.gripper}")
