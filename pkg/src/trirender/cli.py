"""Command-line interface: ``trirender <command> [flags]``.

Every field of the model, pretraining and finetuning configs has a flag
(``--mask-ratio``, ``--weight-depth``, ``--resolution 16 16 16``...). Values
come from the defaults, then the JSON file given by ``--config`` (sections
``model``, ``pretrain`` and ``finetune``), then the flags.

Exit status: 0 on success, 2 on invalid input, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .container import read_json, read_tensor, write_json, write_preview_png, write_tensor
from .data import (DEFAULT_BOUNDS, SceneSpec, default_rig, make_pick_place_demo, random_scene, raytrace_views,
                   read_dataset, write_dataset)
from .errors import TrirenderError, ValidationError
from .geometry import CameraView, load_calibration, save_calibration
from .losses import LossWeights
from .nets import Model, ModelConfig
from .policy import infer_action
from .render import RenderConfig
from .training import (FinetuneConfig, PretrainConfig, build_samples, encoded_grids, evaluate_policy, finetune,
                       gradcheck, load_checkpoint, pretrain, render_view, save_checkpoint, static_sample)

log = logging.getLogger("trirender")

# ---------------------------------------------------------------- config flags

_SKIP = {"seed", "weights"}


def _flag(name: str, prefix: str = "") -> str:
    return "--" + prefix + name.replace("_", "-")


def _add_config_flags(parser, cls, prefix: str = "", dest_prefix: str = ""):
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in dataclasses.fields(cls):
        if f.name in _SKIP and cls is not LossWeights:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        kw = dict(dest=dest_prefix + f.name, default=argparse.SUPPRESS)
        if isinstance(default, bool):
            kw["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, tuple) or f.name == "rope_split":
            kw.update(nargs=3, type=int, metavar="N")
        elif isinstance(default, int):
            kw["type"] = int
        else:
            kw["type"] = float
        group.add_argument(_flag(f.name, prefix), help=f"default {default}", **kw)


def _section(args, dest_prefix: str) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith(dest_prefix):
            out[key[len(dest_prefix):]] = tuple(value) if isinstance(value, list) else value
    return out


def _file_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    cfg = read_json(args.config)
    if not isinstance(cfg, dict) or set(cfg) - {"model", "pretrain", "finetune"}:
        raise ValidationError(f"{args.config}: expected sections among model, pretrain, finetune")
    return cfg


def _model_config(args) -> ModelConfig:
    merged = {**_file_config(args).get("model", {}), **_section(args, "model__")}
    return ModelConfig.from_dict(merged)


def _train_config(args, cls, name: str):
    file_section = dict(_file_config(args).get(name, {}))
    weights = {**dataclasses.asdict(LossWeights()), **file_section.pop("weights", {}),
               **_section(args, "weights__")}
    merged = {**file_section, **_section(args, "train__"), "weights": LossWeights(**weights), "seed": args.seed}
    return cls.from_dict(merged)


# ---------------------------------------------------------------- observations

def _write_views(root: Path, views: list[CameraView]) -> None:
    (root / "rig").mkdir(parents=True, exist_ok=True)
    for j, v in enumerate(views):
        save_calibration(root / "rig" / f"cam{j}.json", v.intrinsics, v.pose)
        write_tensor(root / f"view{j}_rgb.trdr", v.rgb)
        write_tensor(root / f"view{j}_depth.trdr", v.depth)
        write_tensor(root / f"view{j}_semantic.trdr", v.semantic)
        write_preview_png(root / f"view{j}_rgb.png", v.rgb)


def _read_views(root: Path) -> list[CameraView]:
    views = []
    j = 0
    while (root / "rig" / f"cam{j}.json").exists():
        intr, pose = load_calibration(root / "rig" / f"cam{j}.json")
        views.append(CameraView(intr, pose, read_tensor(root / f"view{j}_rgb.trdr", (intr.height, intr.width, 3)),
                                read_tensor(root / f"view{j}_depth.trdr", (intr.height, intr.width)),
                                read_tensor(root / f"view{j}_semantic.trdr")))
        j += 1
    if not views:
        raise ValidationError(f"{root}: no rig/cam0.json, not an observation directory")
    return views


def _observation(args):
    """``(views, task_id)`` from ``--obs DIR`` or ``--data DIR --demo i --frame k``."""
    if args.obs:
        return _read_views(Path(args.obs)), args.task
    if args.data:
        demos = read_dataset(args.data)
        if not 0 <= args.demo < len(demos):
            raise ValidationError(f"demo {args.demo} outside [0, {len(demos)})")
        demo = demos[args.demo]
        frame = args.frame if args.frame >= 0 else len(demo) + args.frame
        if not 0 <= frame < len(demo):
            raise ValidationError(f"frame {args.frame} outside the demonstration")
        return demo.frames[frame].views, demo.task_id
    raise ValidationError("need --obs or --data")


def _bounds(args):
    scene = Path(args.obs) / "scene.json" if getattr(args, "obs", None) else None
    if scene is not None and scene.exists():
        return SceneSpec.load(scene).bounds
    return DEFAULT_BOUNDS


# ---------------------------------------------------------------- commands

def cmd_gen_scene(args) -> int:
    rng = np.random.default_rng(args.seed)
    scene = random_scene(rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    _write_views(out, raytrace_views(scene, default_rig(size=args.size)))
    log.info("scene with %d primitives written to %s", len(scene.primitives), out)
    return 0


def cmd_gen_demos(args) -> int:
    rng = np.random.default_rng(args.seed)
    rig = default_rig(size=args.size)
    demos = [make_pick_place_demo(random_scene(rng), rng, rig, task_id=i % args.tasks,
                                  segment_frames=args.segment_frames) for i in range(args.demos)]
    write_dataset(args.out, demos)
    log.info("%d demonstrations (%s frames) written to %s", len(demos), [len(d) for d in demos], args.out)
    return 0


def _progress(every: int):
    def report(rec):
        if rec.step % every == 0:
            log.info("step %d  loss %.5f  lr %.2e", rec.step, rec.total, rec.lr)
    return report


def _start_model(args):
    if args.init:
        model, report = load_checkpoint(args.init)
        log.info("loaded %d tensors, %d initialized, %d unused", len(report["loaded"]),
                 len(report["initialized"]), len(report["unused"]))
        return model
    return Model.create(_model_config(args), seed=args.seed)


def _finish(args, model, records, cfg, command: str) -> int:
    out = Path(args.out)
    save_checkpoint(out / "checkpoint", model, {"command": command, command: cfg.to_dict()})
    with open(out / "losses.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    final = records[-1].total if records else float("nan")
    print(json.dumps({"checkpoint": str(out / "checkpoint"), "steps": len(records), "final_loss": final}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _train_config(args, PretrainConfig, "pretrain")
    if args.obs:
        samples = [static_sample(_read_views(Path(args.obs)), args.task)]
    elif args.data:
        samples = build_samples(read_dataset(args.data), args.vel_eps, args.gripper_change_is_keyframe)
    else:
        raise ValidationError("need --obs or --data")
    model = _start_model(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    records = pretrain(model, samples, cfg, _bounds(args), callback=_progress(args.log_every))
    return _finish(args, model, records, cfg, "pretrain")


def cmd_finetune(args) -> int:
    cfg = _train_config(args, FinetuneConfig, "finetune")
    samples = build_samples(read_dataset(args.data), args.vel_eps, args.gripper_change_is_keyframe)
    model = _start_model(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    records = finetune(model, samples, cfg, DEFAULT_BOUNDS, callback=_progress(args.log_every))
    return _finish(args, model, records, cfg, "finetune")


def cmd_render(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    views, task = _observation(args)
    bounds = _bounds(args)
    intr, pose = load_calibration(args.camera)
    now, future = encoded_grids(model, views, task, bounds)
    grid = future if args.branch == "future" else now
    target = CameraView(intr, pose, np.zeros((intr.height, intr.width, 3)), np.zeros((intr.height, intr.width)),
                        np.zeros((intr.height, intr.width, 1)))
    config = RenderConfig(args.n_coarse, args.n_fine_depth, args.n_fine_uniform, jitter=False)
    rgb, sem, depth = render_view(model, grid, target, bounds, config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "rgb.trdr", rgb)
    write_tensor(out / "depth.trdr", depth)
    write_tensor(out / "semantic.trdr", sem)
    write_preview_png(out / "rgb.png", rgb)
    write_preview_png(out / "depth.png", depth / max(float(depth.max()), 1e-9))
    write_preview_png(out / "semantic.png", np.argmax(sem, axis=-1) / max(sem.shape[-1] - 1, 1))
    log.info("rendered %dx%d %s view to %s", intr.width, intr.height, args.branch, out)
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.data and args.frame is None:
        samples = build_samples(read_dataset(args.data), args.vel_eps, args.gripper_change_is_keyframe)
        m = evaluate_policy(model, samples, DEFAULT_BOUNDS)
        print(json.dumps(dataclasses.asdict(m), sort_keys=True))
        return 0
    if args.frame is None:
        args.frame = 0
    views, task = _observation(args)
    action = infer_action(model, views, task, _bounds(args))
    print(json.dumps({"translation_m": action.translation.tolist(), "rotation_deg": action.rotation.tolist(),
                      "gripper": action.gripper}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck(seed=args.seed, per_group=args.per_group, n_rays=args.rays, freeze=tuple(args.freeze))
    print(json.dumps({"max_rel_error": res.max_rel_error, "per_group": res.per_group, "checked": res.checked,
                      "worst": list(res.worst), "passed": res.passed}, sort_keys=True))
    return 0 if res.passed else 1


# ---------------------------------------------------------------- parser

def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with model / pretrain / finetune sections")
    if out_required is not None:
        p.add_argument("--out", required=out_required, help="output directory")


def _obs_flags(p):
    p.add_argument("--obs", help="observation directory written by gen-scene")
    p.add_argument("--data", help="dataset directory written by gen-demos")
    p.add_argument("--demo", type=int, default=0)
    p.add_argument("--task", type=int, default=0, help="task id for --obs observations")


def _keyframe_flags(p):
    p.add_argument("--vel-eps", type=float, default=1e-3, help="joint speed below which a frame is at rest")
    p.add_argument("--gripper-change-is-keyframe", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trirender", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="random tabletop scene and its two raytraced views")
    _common(p)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("gen-demos", help="scripted pick-place demonstrations as a dataset")
    _common(p)
    p.add_argument("--demos", type=int, default=5)
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--segment-frames", type=int, default=4)
    p.set_defaults(func=cmd_gen_demos)

    for name, cls, func in (("pretrain", PretrainConfig, cmd_pretrain), ("finetune", FinetuneConfig, cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model and write a checkpoint")
        _common(p)
        if name == "pretrain":
            _obs_flags(p)
        else:
            p.add_argument("--data", required=True)
        _keyframe_flags(p)
        p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
        p.add_argument("--log-every", type=int, default=50)
        _add_config_flags(p, cls, dest_prefix="train__")
        _add_config_flags(p, LossWeights, prefix="weight-", dest_prefix="weights__")
        _add_config_flags(p, ModelConfig, dest_prefix="model__")
        p.set_defaults(func=func)

    p = sub.add_parser("render", help="render a triplane into a camera")
    _common(p)
    _obs_flags(p)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="calibration JSON")
    p.add_argument("--branch", choices=("now", "future"), default="now")
    p.add_argument("--n-coarse", type=int, default=128)
    p.add_argument("--n-fine-depth", type=int, default=64)
    p.add_argument("--n-fine-uniform", type=int, default=64)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="decode an action, or score a whole dataset")
    _common(p, out_required=None)
    _obs_flags(p)
    _keyframe_flags(p)
    p.add_argument("--frame", type=int, default=None, help="with --data: score this frame only")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the pretraining gradient")
    _common(p, out_required=None)
    p.add_argument("--per-group", type=int, default=64)
    p.add_argument("--rays", type=int, default=4)
    p.add_argument("--freeze", nargs="*", default=[])
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(1):
            return args.func(args)
    except ValidationError as exc:
        print(f"trirender: invalid input: {exc}", file=sys.stderr)
        return 2
    except (TrirenderError, OSError) as exc:
        print(f"trirender: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
