"""Per-property losses over a ray batch and their weighted total.

Every loss sums over the rays of the batch and over both the coarse and the
fine rendering, and returns gradients w.r.t. both renderings.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .properties import Kind, LossKind, PropertySpec

__all__ = ["LossError", "PropertyLoss", "LossReport", "mse_loss", "cross_entropy_loss", "l1_loss",
           "property_loss", "total_loss"]


class LossError(ValueError):
    pass


@dataclass
class PropertyLoss:
    value: float
    grad_coarse: np.ndarray
    grad_fine: np.ndarray


def _check(*arrays):
    shape = np.shape(arrays[-1])
    for a in arrays[:-1]:
        if np.shape(a) != shape:
            raise LossError(f"shape mismatch: {np.shape(a)} vs {shape}")


def mse_loss(pred_coarse, pred_fine, truth) -> PropertyLoss:
    _check(pred_coarse, pred_fine, truth)
    rc = np.asarray(pred_coarse) - truth
    rf = np.asarray(pred_fine) - truth
    value = float(np.sum(rc.astype(np.float64) ** 2) + np.sum(rf.astype(np.float64) ** 2))
    return PropertyLoss(value, 2 * rc, 2 * rf)


def l1_loss(pred_coarse, pred_fine, truth) -> PropertyLoss:
    """Sum of absolute errors; the subgradient at equality is 0."""
    _check(pred_coarse, pred_fine, truth)
    rc = np.asarray(pred_coarse) - truth
    rf = np.asarray(pred_fine) - truth
    value = float(np.abs(rc.astype(np.float64)).sum() + np.abs(rf.astype(np.float64)).sum())
    return PropertyLoss(value, np.sign(rc), np.sign(rf))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits_coarse, logits_fine, truth) -> PropertyLoss:
    """Negative log-likelihood of the softmax of the rendered logits.

    ``truth`` holds class indices (R,) or per-class target probabilities (R, L).
    """
    lc = np.asarray(logits_coarse)
    lf = np.asarray(logits_fine)
    if lc.shape != lf.shape or lc.ndim != 2:
        raise LossError(f"logits must share an (R, L) shape, got {lc.shape} and {lf.shape}")
    n_classes = lc.shape[1]
    truth = np.asarray(truth)
    if truth.ndim == 1:
        if truth.shape[0] != lc.shape[0]:
            raise LossError("one label per ray required")
        if truth.min(initial=0) < 0 or truth.max(initial=0) >= n_classes:
            raise LossError(f"class index outside [0, {n_classes})")
        target = np.zeros(lc.shape)
        target[np.arange(len(truth)), truth.astype(np.intp)] = 1.0
    else:
        _check(lc, truth)
        target = truth.astype(np.float64)
    value = 0.0
    grads = []
    for z in (lc, lf):
        logp = _log_softmax(z.astype(np.float64))
        value -= float((target * logp).sum())
        grads.append((np.exp(logp) - target).astype(z.dtype))
    return PropertyLoss(value, grads[0], grads[1])


_LOSSES = {LossKind.MSE: mse_loss, LossKind.CROSS_ENTROPY: cross_entropy_loss, LossKind.L1: l1_loss}


def property_loss(spec: PropertySpec, pred_coarse, pred_fine, truth) -> PropertyLoss:
    return _LOSSES[spec.loss](pred_coarse, pred_fine, truth)


@dataclass
class LossReport:
    per_property: dict  # kind -> unweighted loss
    total: float
    ray_count: int
    grads_coarse: dict = field(default_factory=dict, repr=False)  # kind -> weighted dL/d(rendered)
    grads_fine: dict = field(default_factory=dict, repr=False)

    def to_json(self, step: int, wall_time: float | None = None) -> str:
        """One loss-log line; ``wall_time`` is omitted when None so logs can be compared bytewise."""
        rec = {
            "step": step,
            "losses": {k.value: v for k, v in self.per_property.items()},
            "total": self.total,
            "rays": self.ray_count,
        }
        if wall_time is not None:
            rec["wall_time"] = round(wall_time, 3)
        return json.dumps(rec)


def total_loss(losses: Mapping[Kind, PropertyLoss], specs: Sequence[PropertySpec]) -> LossReport:
    """``L_rgb + sum_i lambda_i L_i`` with gradients scaled by each property's weight."""
    per, gc, gf = {}, {}, {}
    total = 0.0
    ray_count = 0
    for s in specs:
        if s.kind not in losses:
            raise LossError(f"missing loss for property {s.kind.value}")
        loss = losses[s.kind]
        per[s.kind] = loss.value
        total += s.weight * loss.value
        gc[s.kind] = s.weight * loss.grad_coarse
        gf[s.kind] = s.weight * loss.grad_fine
        ray_count = len(loss.grad_coarse)
    if not all(np.isfinite(v) and v >= 0 for v in per.values()):
        bad = [k.value for k, v in per.items() if not (np.isfinite(v) and v >= 0)]
        raise LossError(f"invalid loss value for {bad}")
    return LossReport(per, total, ray_count, gc, gf)
