"""Rendering, pretraining and finetuning objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import InvalidBin, NoValidDepth, TranslationOutOfBounds, ValidationError
from .geometry import Bounds


@dataclass
class LossWeights:
    rgb: float = 1.0
    semantic: float = 0.1
    depth: float = 0.01
    recon: float = 1.0
    pred: float = 1.0
    trans: float = 1.0
    rot: float = 1.0
    gripper: float = 1.0
    silog_lambda: float = 0.5

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValidationError("loss weights must be non-negative")


def mse(pred, target) -> ag.Tensor:
    diff = ag.as_tensor(pred) - np.asarray(target)
    return (diff * diff).mean()


def silog(pred_depth, target_depth, lam: float = 0.5) -> ag.Tensor:
    """Scale-invariant log loss: ``mean(e^2) - lam * mean(e)^2`` with
    ``e = log(pred) - log(target)``."""
    pred = ag.as_tensor(pred_depth)
    e = ag.log(pred) - np.log(np.asarray(target_depth, dtype=pred.dtype))
    m = e.mean()
    return (e * e).mean() - lam * (m * m)


def render_loss(rendered, target_rgb, target_semantic, target_depth, weights: LossWeights = LossWeights(),
                min_depth: float = 1e-4, strict: bool = False):
    """Weighted color MSE + semantic MSE + SiLog depth over valid-depth pixels.

    Returns ``(total, terms)`` where ``terms`` maps each unweighted term name
    to a Tensor. Without any valid target depth the depth term is dropped
    (``terms['depth_skipped']`` is set); ``strict=True`` raises instead.
    """
    terms = {"rgb": mse(rendered.rgb, target_rgb), "semantic": mse(rendered.semantic, target_semantic)}
    depth = np.asarray(target_depth)
    valid = np.isfinite(depth) & (depth > 0)
    total = terms["rgb"] * weights.rgb + terms["semantic"] * weights.semantic
    if valid.any():
        pred = ag.maximum(ag.as_tensor(rendered.depth)[np.nonzero(valid)[0]], min_depth)
        terms["depth"] = silog(pred, depth[valid], weights.silog_lambda)
        total = total + terms["depth"] * weights.depth
    elif strict:
        raise NoValidDepth("no valid target depth in the batch")
    else:
        terms["depth_skipped"] = True
    return total, terms


def pretrain_loss(recon, pred, weights: LossWeights = LossWeights()):
    """``recon * L_recon + pred * L_pred``."""
    if weights.pred == 0:
        return ag.as_tensor(recon) * weights.recon
    return ag.as_tensor(recon) * weights.recon + ag.as_tensor(pred) * weights.pred


def plane_target(coords: tuple[float, float], shape: tuple[int, int], sigma: float = 1.0) -> np.ndarray:
    """Target distribution on one plane: one-hot at the containing cell, or a
    Gaussian of ``sigma`` cells around it, normalized to sum to 1."""
    na, nb = shape
    ia, ib = int(coords[0]), int(coords[1])
    if sigma <= 0:
        t = np.zeros(shape)
        t[ia, ib] = 1.0
        return t
    ga = np.exp(-0.5 * ((np.arange(na) - ia) / sigma) ** 2)
    gb = np.exp(-0.5 * ((np.arange(nb) - ib) / sigma) ** 2)
    t = np.outer(ga, gb)
    return t / t.sum()


def heatmap_targets(translation, shape3d, bounds: Bounds, sigma: float = 1.0) -> dict[str, np.ndarray]:
    t = np.asarray(translation, dtype=np.float64)
    if not bounds.contains(t, eps=1e-9):
        raise TranslationOutOfBounds(f"translation {t} outside the workspace")
    idx = np.clip(np.floor((t - bounds.lo) / (bounds.size / np.asarray(shape3d))).astype(int), 0,
                  np.asarray(shape3d) - 1)
    X, Y, Z = shape3d
    return {
        "xy": plane_target((idx[0], idx[1]), (X, Y), sigma),
        "xz": plane_target((idx[0], idx[2]), (X, Z), sigma),
        "yz": plane_target((idx[1], idx[2]), (Y, Z), sigma),
    }


def cross_entropy(logits, target_dist) -> ag.Tensor:
    """``-sum(target * log_softmax(logits))`` over the last axis, averaged over the rest."""
    lp = ag.log_softmax(ag.as_tensor(logits), axis=-1)
    ce = -(lp * np.asarray(target_dist, dtype=lp.dtype)).sum(axis=-1)
    return ce.mean() if ce.ndim else ce


def heatmap_ce(heatmaps, translation, bounds: Bounds, sigma: float = 1.0) -> ag.Tensor:
    """Mean over the three planes of the cross-entropy against the projected target."""
    targets = heatmap_targets(translation, heatmaps.shape3d, bounds, sigma)
    total = None
    for name, scores in heatmaps.planes().items():
        ce = cross_entropy(ag.as_tensor(scores).reshape(-1), targets[name].reshape(-1))
        total = ce if total is None else total + ce
    return total * (1.0 / 3.0)


def finetune_loss(heatmaps, rot_logits, gripper_logits, action, bounds: Bounds,
                  weights: LossWeights = LossWeights(), sigma: float = 1.0, bins=None):
    """``trans * heatmap CE + rot * mean_axis CE + gripper * CE``; returns ``(total, terms)``.

    ``bins`` overrides the rotation bins derived from ``action.rotation``.
    """
    rot_logits = ag.as_tensor(rot_logits).reshape(3, -1)
    B = rot_logits.shape[1]
    bins = action.rotation_bins(B) if bins is None else np.asarray(bins)
    if np.any(bins < 0) or np.any(bins >= B):
        raise InvalidBin(f"rotation bins {bins} outside [0, {B})")
    terms = {
        "trans": heatmap_ce(heatmaps, action.translation, bounds, sigma),
        "rot": cross_entropy(rot_logits, np.eye(B)[bins]),
        "gripper": cross_entropy(ag.as_tensor(gripper_logits).reshape(-1), np.eye(2)[action.gripper]),
    }
    total = terms["trans"] * weights.trans + terms["rot"] * weights.rot + terms["gripper"] * weights.gripper
    return total, terms
