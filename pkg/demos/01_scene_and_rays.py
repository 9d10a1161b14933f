"""A synthetic tabletop, its two raytraced RGB-D views, the fused point cloud,
a warp into an orbiting camera, and volume rendering of an analytic medium.

    python3 demos/01_scene_and_rays.py --out demo_out/scene
"""

import argparse
from pathlib import Path

import numpy as np

from trirender.container import write_preview_png
from trirender.data import default_rig, random_scene, raytrace_views
from trirender.geometry import sample_perturbed_trajectory, warp_to_view
from trirender.policy import observation_cloud
from trirender.render import RayBatch, composite, sample_coarse

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="demo_out/scene")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# %% scene and views
rng = np.random.default_rng(args.seed)
scene = random_scene(rng)
for p in scene.primitives:
    print(f"{p.kind:6s} label {p.label} at {np.round(p.center, 3)} size {np.round(p.size, 3)}"
          + (" (movable)" if p.movable else ""))
views = raytrace_views(scene, default_rig())
for j, v in enumerate(views):
    write_preview_png(out / f"view{j}.png", v.rgb)
    print(f"view {j}: {v.valid.mean():.0%} of pixels hit something, depth {v.depth[v.valid].min():.3f}"
          f" to {v.depth[v.valid].max():.3f} m")

# %% both views fused into one cloud, then splatted into a camera 20 degrees off view 0
cloud = observation_cloud(views)
print(f"fused cloud: {len(cloud)} points")
pose = sample_perturbed_trajectory(views[0].pose, scene.bounds.center, angle_deg=20.0)[-1]
rgb, depth, mask = warp_to_view(cloud, views[0].intrinsics, pose)
write_preview_png(out / "warped.png", rgb)
print(f"warped view covers {mask.mean():.0%} of its pixels (holes are disocclusions)")

# %% volume rendering through a constant-density slab: opacity follows 1 - exp(-sigma * length)
rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), np.zeros(1), np.ones(1))
samples = sample_coarse(rays, 256, jitter=False)
for sigma in (0.1, 1.0, 10.0):
    px = composite(samples, np.full((1, 256), sigma), np.ones((1, 256, 3)), np.ones((1, 256, 1)))
    length = 1.0 - samples.t[0, 0]
    print(f"sigma {sigma:5.1f}: opacity {float(px.opacity.data[0]):.6f}"
          f"  analytic {1 - np.exp(-sigma * length):.6f}")
print(f"images written to {out}")
