"""Pretraining (masked reconstruction + future prediction) and finetuning loops,
checkpoints, evaluation and the full-pipeline gradient check."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import Demonstration, discover_keyframes
from .errors import CorruptManifest, ValidationError, VersionMismatch
from .geometry import (Bounds, CameraView, PointCloud, apply_se3_augmentation, generate_rays,
                       sample_perturbed_trajectory, warped_view)
from .losses import LossWeights, finetune_loss, pretrain_loss, render_loss
from .nets import Model, ModelConfig
from .policy import (ActionKeyframe, argmax_3d, classify_at, decode_heatmaps, infer_action, observation_cloud,
                     translation_to_cell)
from .render import RayBatch, RenderConfig, SamplePlan, render_rays, sample_coarse
from .triplane import MaskPattern, apply_mask

CHECKPOINT_VERSION = 1


@dataclass
class Sample:
    """One (current observation, next-keyframe observation, action) triple."""

    current: list[CameraView]
    future: list[CameraView]
    task_id: int = 0
    action: ActionKeyframe | None = None
    index: tuple[int, int, int] = (0, 0, 0)  # (demo, current frame, future frame)


def build_samples(demos: list[Demonstration], vel_eps: float = 1e-3,
                  gripper_change_is_keyframe: bool = False) -> list[Sample]:
    """Pair frame 0 and every keyframe but the last with the keyframe after it."""
    out = []
    for di, demo in enumerate(demos):
        keys = discover_keyframes(demo, vel_eps, gripper_change_is_keyframe)
        for cur, nxt in keys.pairs():
            f = demo.frames[nxt]
            out.append(Sample(demo.frames[cur].views, f.views, demo.task_id,
                              ActionKeyframe.from_pose(f.ee_pose, f.gripper), (di, cur, nxt)))
    return out


def static_sample(views: list[CameraView], task_id: int = 0) -> Sample:
    return Sample(views, views, task_id)


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 4
    rays: int = 32
    mask_ratio: float = 0.5
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    view_augmentation: bool = True
    warped_mix: float = 0.5
    max_view_angle: float = 30.0
    se3_augmentation: bool = True
    max_translation: float = 0.125
    max_rotation: float = 45.0
    n_coarse: int = 128
    n_fine_depth: int = 64
    n_fine_uniform: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.rays < 1:
            raise ValidationError("ray batch K must be at least 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValidationError("mask ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch size must be positive and steps non-negative")
        if not 0.0 <= self.warped_mix <= 1.0:
            raise ValidationError("warped mix must lie in [0, 1]")

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine_depth, self.n_fine_uniform)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        return _config_from_dict(cls, d)


@dataclass
class FinetuneConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    heatmap_sigma: float = 1.0
    se3_augmentation: bool = True
    max_translation: float = 0.125
    max_rotation: float = 45.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch size must be positive and steps non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        return _config_from_dict(cls, d)


def _config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class LossRecord:
    """``total`` equals the sum of the weighted ``terms``."""

    step: int
    total: float
    terms: dict[str, float]
    lr: float
    targets: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "total": self.total, "terms": self.terms, "lr": self.lr,
                           "targets": self.targets}, sort_keys=True)


def make_optimizer(cfg, total_steps: int | None = None) -> ag.AdamW:
    return ag.AdamW(lr=cfg.lr, total_steps=total_steps or cfg.steps, weight_decay=cfg.weight_decay,
                    min_lr=cfg.min_lr)


# ---------------------------------------------------------------- target rays

@dataclass
class RayTargets:
    rays: RayBatch
    rgb: np.ndarray
    semantic: np.ndarray
    depth: np.ndarray  # distance along the ray, 0 where invalid


def view_rays(view: CameraView, bounds: Bounds, pixels=None, only_valid: bool = False) -> RayTargets:
    """Rays through ``pixels`` (flat indices; default all) of ``view`` that hit
    the workspace, with their supervision targets."""
    h, w = view.intrinsics.height, view.intrinsics.width
    flat = np.arange(h * w) if pixels is None else np.asarray(pixels)
    v, u = np.divmod(flat, w)
    o, d, tn, tf, length, hit = generate_rays(view, u, v, bounds)
    keep = hit & view.valid[v, u] if only_valid else hit
    v, u = v[keep], u[keep]
    z = view.depth[v, u].astype(np.float64)
    depth = np.where(view.valid[v, u], z * length[keep], 0.0)
    return RayTargets(RayBatch(o[keep], d[keep], tn[keep], tf[keep]), view.rgb[v, u], view.semantic[v, u], depth)


def sample_target_rays(view: CameraView, k: int, bounds: Bounds, rng: np.random.Generator,
                       only_valid: bool = False) -> RayTargets:
    """``k`` distinct random rays (fewer if the view has fewer candidates)."""
    all_rays = view_rays(view, bounds, only_valid=only_valid)
    n = len(all_rays.rays)
    if n == 0:
        return all_rays
    pick = np.sort(rng.choice(n, size=min(k, n), replace=False))
    return RayTargets(all_rays.rays.subset(pick), all_rays.rgb[pick], all_rays.semantic[pick], all_rays.depth[pick])


def choose_target_view(views: list[CameraView], cloud: PointCloud | None, bounds: Bounds, rng: np.random.Generator,
                       warped_mix: float = 0.5, enabled: bool = True, max_angle: float = 30.0):
    """Returns ``(view, kind)``: with probability ``warped_mix`` (when enabled
    and a cloud is given) a point-cloud warp into a camera orbited off one of
    the real cameras, otherwise a uniformly chosen real view."""
    if enabled and cloud is not None and rng.uniform() < warped_mix:
        base = views[rng.integers(len(views))]
        traj = sample_perturbed_trajectory(base.pose, bounds.center, rng, max_angle_deg=max_angle)
        pose = traj[rng.integers(len(traj))]
        return warped_view(cloud, base.intrinsics, pose), "warped"
    return views[rng.integers(len(views))], "real"


def supervise(grid, model: Model, targets: RayTargets, rng, config: RenderConfig, weights: LossWeights,
              prefix: str, scale: float, terms: dict):
    """Render coarse + fine against ``targets``; returns the summed loss Tensor
    and adds each weighted scalar contribution (times ``scale``) to ``terms``."""
    coarse, fine, _ = render_rays(grid, model.head, targets.rays, rng, config)
    total = None
    for stage, px in (("coarse", coarse), ("fine", fine)):
        loss, parts = render_loss(px, targets.rgb, targets.semantic, targets.depth, weights)
        for name, w in (("rgb", weights.rgb), ("semantic", weights.semantic), ("depth", weights.depth)):
            if name in parts:
                key = f"{prefix}.{stage}.{name}"
                terms[key] = terms.get(key, 0.0) + scale * w * float(parts[name].data)
        total = loss if total is None else total + loss
    return total


def _augment(sample: Sample, bounds: Bounds, rng, cfg, with_action: bool):
    """SE(3) augmentation of the observation cloud, every camera and the
    action. Draws whose action leaves the workspace are redrawn (up to 10
    times, then the sample passes through unchanged)."""
    cloud = observation_cloud(sample.current)
    if not cfg.se3_augmentation:
        return cloud, sample.current, sample.future, sample.action
    views = list(sample.current) + list(sample.future)
    for _ in range(10):
        new_cloud, poses, action = apply_se3_augmentation(
            cloud, [v.pose for v in views], sample.action if with_action else None, rng,
            max_translation=cfg.max_translation, max_rotation_deg=cfg.max_rotation, center=bounds.center)
        if action is not None and not bounds.contains(action.translation):
            continue
        moved = [CameraView(v.intrinsics, p, v.rgb, v.depth, v.semantic) for v, p in zip(views, poses)]
        n = len(sample.current)
        return new_cloud, moved[:n], moved[n:], action if with_action else sample.action
    return cloud, sample.current, sample.future, sample.action


# ---------------------------------------------------------------- steps

def pretrain_step(model: Model, opt: ag.AdamW, batch: list[Sample], cfg: PretrainConfig, bounds: Bounds,
                  rng: np.random.Generator) -> LossRecord:
    """One optimizer step of ``lambda_recon * L_recon + lambda_pred * L_pred``
    averaged over the batch."""
    w = cfg.weights
    rcfg = cfg.render_config()
    terms: dict[str, float] = {}
    kinds = []
    total = 0.0
    scale = 1.0 / len(batch)
    lr = opt.current_lr(model.store.step)
    for sample in batch:
        cloud, current, future, _ = _augment(sample, bounds, rng, cfg, with_action=False)
        with ag.Tape() as tape:
            grid = model.triplane(cloud, bounds)
            if cfg.mask_ratio > 0:
                grid = apply_mask(grid, MaskPattern.sample(model.config.resolution, cfg.mask_ratio, rng),
                                  model.mask_embedding)
            now, fut = model.encode(grid, sample.task_id, with_future=w.pred > 0)
            view, kind = choose_target_view(current, cloud, bounds, rng, cfg.warped_mix, cfg.view_augmentation,
                                            cfg.max_view_angle)
            kinds.append(kind)
            targets = sample_target_rays(view, cfg.rays, bounds, rng, only_valid=(kind == "warped"))
            recon = supervise(now, model, targets, rng, rcfg, w, "recon", scale * w.recon, terms)
            pred = None
            if w.pred > 0:
                fview = future[rng.integers(len(future))]
                ftargets = sample_target_rays(fview, cfg.rays, bounds, rng)
                pred = supervise(fut, model, ftargets, rng, rcfg, w, "pred", scale * w.pred, terms)
            loss = pretrain_loss(recon, pred, w) * scale
        ag.backward(tape, loss)
        total += float(loss.data)
    opt.step(model.store)
    return LossRecord(model.store.step, total, terms, lr, kinds)


def finetune_forward(model: Model, sample_cloud: PointCloud, task_id: int, action: ActionKeyframe, bounds: Bounds,
                     weights: LossWeights, sigma: float):
    grid = model.triplane(sample_cloud, bounds)
    _, fut = model.encode(grid, task_id)
    hm = decode_heatmaps(model.heatmaps, fut)
    rot, grip = classify_at(model.classifier, fut, action.translation)
    return finetune_loss(hm, rot, grip, action, bounds, weights, sigma)


def finetune_step(model: Model, opt: ag.AdamW, batch: list[Sample], cfg: FinetuneConfig, bounds: Bounds,
                  rng: np.random.Generator) -> LossRecord:
    """No masking: triplane -> both encoders -> heatmaps and classifier at the
    ground-truth translation -> finetune loss."""
    w = cfg.weights
    terms: dict[str, float] = {}
    total = 0.0
    scale = 1.0 / len(batch)
    lr = opt.current_lr(model.store.step)
    for sample in batch:
        if sample.action is None:
            raise ValidationError("finetuning needs action labels")
        cloud, _, _, action = _augment(sample, bounds, rng, cfg, with_action=True)
        with ag.Tape() as tape:
            loss, parts = finetune_forward(model, cloud, sample.task_id, action, bounds, w, cfg.heatmap_sigma)
            loss = loss * scale
        ag.backward(tape, loss)
        total += float(loss.data)
        for name, lam in (("trans", w.trans), ("rot", w.rot), ("gripper", w.gripper)):
            terms[name] = terms.get(name, 0.0) + scale * lam * float(parts[name].data)
    opt.step(model.store)
    return LossRecord(model.store.step, total, terms, lr)


def _batches(n: int, size: int, rng: np.random.Generator):
    if size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def pretrain(model: Model, samples: list[Sample], cfg: PretrainConfig, bounds: Bounds, log=None,
             callback=None) -> list[LossRecord]:
    """Runs ``cfg.steps`` steps; ``callback(record)`` returning True stops early."""
    if not samples:
        raise ValidationError("no pretraining samples")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    records = []
    for _ in range(cfg.steps):
        batch = [samples[i] for i in _batches(len(samples), cfg.batch_size, rng)]
        rec = pretrain_step(model, opt, batch, cfg, bounds, rng)
        records.append(rec)
        if log is not None:
            log.write(rec.to_json() + "\n")
        if callback is not None and callback(rec):
            break
    return records


def finetune(model: Model, samples: list[Sample], cfg: FinetuneConfig, bounds: Bounds, log=None,
             callback=None) -> list[LossRecord]:
    if not samples:
        raise ValidationError("no finetuning samples")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    model.store.step = 0
    model.store.moments = {}
    records = []
    for _ in range(cfg.steps):
        batch = [samples[i] for i in _batches(len(samples), cfg.batch_size, rng)]
        rec = finetune_step(model, opt, batch, cfg, bounds, rng)
        records.append(rec)
        if log is not None:
            log.write(rec.to_json() + "\n")
        if callback is not None and callback(rec):
            break
    return records


def steps_to_threshold(records: list[LossRecord], threshold: float, window: int = 1) -> int | None:
    """First step at which the mean loss of the last ``window`` steps is at or
    below ``threshold`` (None if never). Steps before a full window are skipped."""
    if window < 1:
        raise ValidationError("window must be positive")
    losses = np.array([r.total for r in records])
    if len(losses) < window:
        return None
    means = np.convolve(losses, np.ones(window) / window, mode="valid")
    hit = np.nonzero(means <= threshold)[0]
    return records[hit[0] + window - 1].step if len(hit) else None


# ---------------------------------------------------------------- evaluation

def render_view(model: Model, grid, view: CameraView, bounds: Bounds, config: RenderConfig | None = None,
                seed: int = 0, chunk: int = 512):
    """Fine-stage rgb, semantics and z-depth for every pixel of ``view``'s
    camera; pixels whose ray misses the workspace stay black."""
    config = config or RenderConfig(jitter=False)
    h, w = view.intrinsics.height, view.intrinsics.width
    rng = np.random.default_rng(seed)
    flat = np.arange(h * w)
    v, u = np.divmod(flat, w)
    o, d, tn, tf, length, hit = generate_rays(view, u, v, bounds)
    rgb = np.zeros((h * w, 3))
    sem = np.zeros((h * w, model.config.semantic_channels))
    depth = np.zeros(h * w)
    idx = np.nonzero(hit)[0]
    with ag.no_grad():
        for s in range(0, len(idx), chunk):
            part = idx[s: s + chunk]
            _, fine, _ = render_rays(grid, model.head, RayBatch(o[part], d[part], tn[part], tf[part]), rng, config)
            rgb[part] = fine.rgb.data
            sem[part] = fine.semantic.data
            depth[part] = fine.depth.data / length[part]
    return rgb.reshape(h, w, 3), sem.reshape(h, w, -1), depth.reshape(h, w)


def psnr(pred, target, peak: float = 1.0) -> float:
    err = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(peak * peak / err)


def encoded_grids(model: Model, views: list[CameraView], task_id: int, bounds: Bounds):
    """Unmasked ``(V_now, V_future)`` for an observation."""
    with ag.no_grad():
        grid = model.triplane(observation_cloud(views), bounds)
        return model.encode(grid, task_id)


@dataclass
class PolicyMetrics:
    translation_accuracy: float
    gripper_accuracy: float
    rotation_accuracy: float
    n: int


def evaluate_policy(model: Model, samples: list[Sample], bounds: Bounds) -> PolicyMetrics:
    """Top-1 heatmap-voxel accuracy of the decoded translation, plus gripper
    and all-axes rotation-bin accuracy, through the inference path."""
    t_ok = g_ok = r_ok = 0
    B = model.config.rotation_bins
    for s in samples:
        with ag.no_grad():
            _, fut = encoded_grids(model, s.current, s.task_id, bounds)
            hm = decode_heatmaps(model.heatmaps, fut)
            idx, _ = argmax_3d(hm, bounds)
        pred = infer_action(model, s.current, s.task_id, bounds)
        t_ok += idx == translation_to_cell(s.action.translation, hm.shape3d, bounds)
        g_ok += pred.gripper == s.action.gripper
        r_ok += bool(np.all(pred.rotation_bins(B) == s.action.rotation_bins(B)))
    n = len(samples)
    return PolicyMetrics(t_ok / n, g_ok / n, r_ok / n, n)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Directory with ``checkpoint.json`` (config, tensor index) and
    ``tensors.bin`` (raw little-endian arrays, in index order)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    state = model.store.state()
    index = []
    offset = 0
    with open(root / "tensors.bin", "wb") as fh:
        for name in sorted(state):
            arr = np.asarray(state[name], order="C")  # keeps 0-d shapes
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                          "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    meta = {"version": CHECKPOINT_VERSION, "model": model.config.to_dict(), "step": model.store.step,
            "dtype": model.store.dtype.name, "tensors": index, "extra": extra or {}}
    (root / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    root = Path(path)
    try:
        meta = json.loads((root / "checkpoint.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{root}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    raw = (root / "tensors.bin").read_bytes()
    tensors = {}
    for e in meta["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise CorruptManifest(f"{root}: tensor {e['name']} runs past the end of tensors.bin")
        dt = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        tensors[e["name"]] = np.frombuffer(raw[e["offset"]: end], dtype=dt).reshape(e["shape"]).copy()
    return meta, tensors


def load_checkpoint(path, model: Model | None = None, with_moments: bool = True):
    """Load into ``model`` (or a fresh one built from the stored config).

    Returns ``(model, report)`` where ``report`` partitions names into
    loaded / initialized / unused.
    """
    meta, tensors = read_checkpoint(path)
    if model is None:
        model = Model.create(ModelConfig.from_dict(meta["model"]), seed=0, dtype=np.dtype(meta["dtype"]))
    report = model.store.load_state(tensors, with_moments)
    model.store.step = int(meta["step"])
    return model, report


# ---------------------------------------------------------------- gradient check

def micro_config() -> ModelConfig:
    return ModelConfig(resolution=(4, 4, 4), channels=4, width=8, depth=1, heads=2, instruction_tokens=1,
                       num_tasks=2, point_hidden=8, head_hidden=8, classifier_hidden=8, rotation_bins=8, upsample=2)


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_group: dict[str, float]
    checked: int
    worst: tuple = ()  # (name, flat index, analytic, numeric) of the largest error
    grad_max: dict[str, float] = field(default_factory=dict)  # max |analytic gradient| per group
    frozen: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-5


def _micro_scene(rng, n_rays: int):
    """16 points, one per cell of every plane (cells ``(i, j, (i + j) % 4)``),
    so max pooling never has to break a near-tie; two cameras with ``n_rays``
    random rays each and random targets."""
    from .geometry import CameraIntrinsics, look_at

    bounds = Bounds(np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))
    i, j = np.divmod(np.arange(16), 4)
    cells = np.stack([i, j, (i + j) % 4], axis=1)
    pos = bounds.lo + (cells + rng.uniform(0.2, 0.8, (16, 3))) * 0.25
    sem = np.eye(8)[rng.integers(0, 8, 16)]
    cloud = PointCloud(pos, rng.uniform(0.0, 1.0, (16, 3)), sem)
    intr = CameraIntrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    targets = []
    for eye in ([1.2, -1.0, 0.8], [-1.0, -1.2, 0.9]):
        u, v = rng.uniform(1.0, 6.0, (2, 4 * n_rays))
        o, d, tn, tf, _, hit = generate_rays((intr, look_at(eye, [0, 0, 0])), u, v, bounds)
        keep = np.nonzero(hit)[0][:n_rays]
        o, d, tn, tf = o[keep], d[keep], tn[keep], tf[keep]
        targets.append(RayTargets(RayBatch(o, d, tn, tf), rng.uniform(0.0, 1.0, (n_rays, 3)),
                                  np.eye(8)[rng.integers(0, 8, n_rays)], rng.uniform(tn, tf)))
    return bounds, cloud, targets


def gradcheck(seed: int = 0, per_group: int = 64, h: float = 1e-4, n_rays: int = 4,
              min_margin: float = 1e-6, tries: int = 50, floor: float = 1e-5,
              freeze: tuple[str, ...] = ()) -> GradcheckResult:
    """Fourth-order central differences against the tape gradient of the
    pretraining loss on a micro model in 64-bit, with sample depths and the
    mask held fixed.

    ReLU, depth clamping and max pooling are only piecewise smooth. The
    perturbed evaluations replay the branch decisions of the unperturbed one
    (see :class:`~trirender.autograd.BranchLog`), and draws with an input
    within ``min_margin`` of a switch point are redrawn. The relative error is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps exactly-zero gradients (dead ReLU units) from turning
    one-ulp roundoff in the loss into a large ratio. Groups named in
    ``freeze`` get no gradient and are reported but not differenced.
    """
    rng = np.random.default_rng(seed)
    bounds, cloud, (cur, fut) = _micro_scene(rng, n_rays)
    weights = LossWeights()
    rcfg = RenderConfig(n_coarse=6, n_fine_depth=3, n_fine_uniform=3)
    mask = None
    plans: dict = {}

    def loss_fn():
        grid = apply_mask(model.triplane(cloud, bounds), mask, model.mask_embedding)
        now, future = model.encode(grid, 1)
        total = None
        for key, g, tg in (("now", now, cur), ("future", future, fut)):
            if key not in plans:
                plans[key] = SamplePlan(sample_coarse(tg.rays, rcfg.n_coarse, rng, True))
            c, f, _ = render_rays(g, model.head, tg.rays, rng, rcfg, plans[key])
            for px in (c, f):
                loss, _ = render_loss(px, tg.rgb, tg.semantic, tg.depth, weights)
                total = loss if total is None else total + loss
        return total

    for _ in range(tries):
        model = Model.create(micro_config(), seed=int(rng.integers(2 ** 31)), dtype=np.float64)
        # Evaluate at a generic point. At initialization the zero output
        # projections hide most transformer gradients, and zero biases turn
        # empty cells into all-zero tokens where query/key normalization is singular.
        for name, t in model.store:
            if name.endswith("out_proj.w") or name.endswith(".b") or name.endswith(".g"):
                t.data[...] += rng.normal(0.0, 0.3, t.shape)
        for prefix in freeze:
            model.store.freeze(prefix)
        mask = MaskPattern.sample(model.config.resolution, 0.25, rng)
        plans.clear()
        branches = ag.BranchLog()
        with ag.Tape() as tape, branches.record():
            loss = loss_fn()
        if ag.kink_margin(tape) > min_margin:
            break
    else:
        raise ValidationError(f"no parameter draw kept every kink farther than {min_margin}")
    model.store.zero_grad()
    ag.backward(tape, loss)
    analytic = {n: t.grad.copy() for n, t in model.store}

    groups: dict[str, list[tuple[str, int]]] = {}
    grad_max: dict[str, float] = {}
    for name, t in model.store:
        g = name.split(".")[0]
        if g == "policy":
            continue  # not on the rendering path
        grad_max[g] = max(grad_max.get(g, 0.0), float(np.abs(analytic[name]).max()))
        if t.requires_grad:
            groups.setdefault(g, []).extend((name, i) for i in range(t.size))
    per: dict[str, float] = {}
    checked = 0
    worst_entry = ()
    stencil = ((2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0))
    with ag.no_grad(), branches.replay():
        for g, entries in groups.items():
            pick = rng.choice(len(entries), size=min(per_group, len(entries)), replace=False)
            worst = 0.0
            for k in pick:
                name, i = entries[k]
                p = model.store[name].data.reshape(-1)
                old = p[i]
                acc = 0.0
                for step, coef in stencil:
                    p[i] = old + step * h
                    with branches.replay():
                        acc += coef * float(loss_fn().data)
                p[i] = old
                num = acc / (12.0 * h)
                a = float(analytic[name].reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if err >= worst:
                    worst = err
                    if err >= max(per.values(), default=0.0):
                        worst_entry = (name, int(i), a, num)
                checked += 1
            per[g] = worst
    return GradcheckResult(max(per.values(), default=0.0), per, checked, worst_entry, grad_max, tuple(freeze))
