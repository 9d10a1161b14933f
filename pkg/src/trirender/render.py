"""Ray sampling and differentiable volumetric compositing.

Weights follow ``w_i = T_i (1 - exp(-sigma_i delta_i))`` with
``T_i = exp(-sum_{j<i} sigma_j delta_j)``, ``delta_i = t_{i+1} - t_i`` and
``delta_N = t_far - t_N``. Rays leaving with residual transmittance
composite against black.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import DegenerateCoarse, ValidationError
from .geometry import Ray
from .triplane import TriplaneGrid, query


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __len__(self):
        return len(self.origins)

    @classmethod
    def from_rays(cls, rays: list[Ray]) -> "RayBatch":
        return cls(np.stack([r.origin for r in rays]), np.stack([r.direction for r in rays]),
                   np.array([r.t_near for r in rays]), np.array([r.t_far for r in rays]))

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx])


@dataclass
class RenderConfig:
    n_coarse: int = 128
    n_fine_depth: int = 64
    n_fine_uniform: int = 64
    sigma_d: float | None = None  # default 0.05 x workspace diagonal
    jitter: bool = True

    def depth_std(self, bounds) -> float:
        return 0.05 * bounds.diagonal if self.sigma_d is None else self.sigma_d


@dataclass
class RaySampleSet:
    t: np.ndarray  # (K, N), non-decreasing along each ray
    t_near: np.ndarray
    t_far: np.ndarray
    stage: str = "coarse"
    degenerate: np.ndarray | None = None
    features: object = None

    def points(self, rays: RayBatch) -> np.ndarray:
        return rays.origins[:, None, :] + self.t[..., None] * rays.directions[:, None, :]


@dataclass
class RenderedPixel:
    rgb: ag.Tensor
    semantic: ag.Tensor
    depth: ag.Tensor
    weights: ag.Tensor
    transmittance: ag.Tensor
    opacity: ag.Tensor
    samples: RaySampleSet | None = field(default=None, repr=False)


def _as_batch(rays) -> RayBatch:
    if isinstance(rays, RayBatch):
        return rays
    if isinstance(rays, Ray):
        return RayBatch.from_rays([rays])
    return RayBatch.from_rays(list(rays))


def _stratified(t_near, t_far, n, rng, jitter):
    edges = np.linspace(0.0, 1.0, n + 1)
    lo, width = edges[:-1], 1.0 / n
    u = rng.uniform(size=(len(t_near), n)) if (jitter and rng is not None) else np.full((len(t_near), n), 0.5)
    frac = lo + u * width
    return t_near[:, None] + frac * (t_far - t_near)[:, None]


def sample_coarse(rays, n: int, rng=None, jitter: bool = True) -> RaySampleSet:
    """One sample per stratum of [t_near, t_far]: uniform within it when
    jittering, the stratum midpoint otherwise."""
    if n < 2:
        raise ValidationError("need at least two coarse samples")
    b = _as_batch(rays)
    return RaySampleSet(_stratified(b.t_near, b.t_far, n, rng, jitter), b.t_near, b.t_far, "coarse")


def sample_fine(rays, coarse_depth, coarse_opacity, n_depth: int, n_uniform: int, sigma_d: float,
                rng=None, jitter: bool = True, warn: bool = False) -> RaySampleSet:
    """Depth-guided samples ~ N(coarse depth, sigma_d) clamped to the ray
    interval, merged with stratified uniform samples and sorted. Rays whose
    coarse opacity is below 1e-6 get ``n_depth + n_uniform`` uniform samples."""
    b = _as_batch(rays)
    D = np.asarray(ag.as_tensor(coarse_depth).data, dtype=np.float64).reshape(-1)
    acc = np.asarray(ag.as_tensor(coarse_opacity).data, dtype=np.float64).reshape(-1)
    degenerate = acc < 1e-6
    if warn and degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} rays had no coarse opacity; using uniform samples",
                      DegenerateCoarse, stacklevel=2)
    n = n_depth + n_uniform
    K = len(b)
    noise = rng.normal(size=(K, n_depth)) if rng is not None else np.zeros((K, n_depth))
    guided = np.clip(D[:, None] + sigma_d * noise, b.t_near[:, None], b.t_far[:, None])
    uniform = _stratified(b.t_near, b.t_far, n_uniform, rng, jitter)
    t = np.sort(np.concatenate([guided, uniform], axis=1), axis=1)
    if degenerate.any():
        fallback = _stratified(b.t_near[degenerate], b.t_far[degenerate], n, rng, jitter)
        t[degenerate] = fallback
    return RaySampleSet(t, b.t_near, b.t_far, "fine", degenerate)


def composite(samples: RaySampleSet, sigma, rgb, semantic) -> RenderedPixel:
    """Alpha-composite per-sample density, color and semantics along each ray.

    ``sigma`` is (K, N); ``rgb`` (K, N, 3); ``semantic`` (K, N, C').
    """
    sigma = ag.as_tensor(sigma)
    dtype = sigma.dtype
    t = np.asarray(samples.t, dtype=dtype)
    delta = np.concatenate([np.diff(t, axis=-1), (np.asarray(samples.t_far, dtype=dtype)[:, None] - t[:, -1:])],
                           axis=-1)
    tau = sigma * delta
    trans = ag.exp(-ag.cumsum_exclusive(tau, axis=-1))
    alpha = -ag.expm1(-tau)
    w = trans * alpha
    w3 = w.reshape(w.shape + (1,))
    return RenderedPixel(
        rgb=(w3 * rgb).sum(axis=1),
        semantic=(w3 * semantic).sum(axis=1),
        depth=(w * t).sum(axis=1),
        weights=w,
        transmittance=trans,
        opacity=w.sum(axis=1),
        samples=samples,
    )


def shade(grid: TriplaneGrid, head, rays: RayBatch, samples: RaySampleSet) -> RenderedPixel:
    K, N = samples.t.shape
    pts = samples.points(rays).reshape(-1, 3)
    feats = query(grid, pts)
    dirs = np.repeat(rays.directions, N, axis=0)
    sigma, rgb, sem = head(feats, dirs)
    return composite(samples, sigma.reshape(K, N), rgb.reshape(K, N, 3), sem.reshape(K, N, -1))


@dataclass
class SamplePlan:
    """Frozen sample depths for both stages (used to replay a render exactly)."""

    coarse: RaySampleSet
    fine: RaySampleSet | None = None


def render_rays(grid: TriplaneGrid, head, rays, rng=None, config: RenderConfig | None = None,
                plan: SamplePlan | None = None):
    """Coarse pass, then depth-guided fine pass. Returns ``(coarse, fine, plan)``.

    Sample depths are constants for differentiation; passing ``plan`` reuses
    the depths of an earlier call instead of drawing new ones.
    """
    config = config or RenderConfig()
    b = _as_batch(rays)
    if plan is None:
        plan = SamplePlan(sample_coarse(b, config.n_coarse, rng, config.jitter))
    coarse = shade(grid, head, b, plan.coarse)
    if plan.fine is None:
        plan.fine = sample_fine(b, coarse.depth, coarse.opacity, config.n_fine_depth, config.n_fine_uniform,
                                config.depth_std(grid.bounds), rng, config.jitter)
    fine = shade(grid, head, b, plan.fine)
    return coarse, fine, plan


def render_pixel_batch(grid: TriplaneGrid, head, rays, rng=None, config: RenderConfig | None = None):
    coarse, fine, _ = render_rays(grid, head, rays, rng, config)
    return coarse, fine
