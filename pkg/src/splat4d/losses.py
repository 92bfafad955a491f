"""Depth, rendering and motion losses, each returning (value, gradient)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NoValidPixels, NoValidPoints


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_r: float = 1.0
    lambda_m: float = 1.0
    lambda_pt: float = 1.0
    lambda_dist: float = 0.1

    def __post_init__(self):
        for name in ("lambda_d", "lambda_r", "lambda_m", "lambda_pt", "lambda_dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    total: float
    depth: float = 0.0
    render: float = 0.0
    motion_pt: float = 0.0
    motion_dist: float = 0.0

    def as_dict(self) -> dict:
        return {"total": self.total, "depth": self.depth, "render": self.render,
                "motion_pt": self.motion_pt, "motion_dist": self.motion_dist}


def depth_loss(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray):
    """MSE on valid pixels plus MSE of forward differences on valid pairs.

    Horizontal and vertical neighbour pairs are pooled into one mean; a pair
    counts only if both of its pixels are valid.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError("pred, gt and valid must share a shape")
    n = int(valid.sum())
    if n == 0:
        raise NoValidPixels("depth loss has no valid pixels")
    r = np.where(valid, pred - gt, 0.0)
    value = float(np.sum(r * r) / n)
    grad = 2.0 * r / n

    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]
    n_pairs = int(vx.sum() + vy.sum())
    if n_pairs:
        ex = np.where(vx, (pred[:, 1:] - pred[:, :-1]) - (gt[:, 1:] - gt[:, :-1]), 0.0)
        ey = np.where(vy, (pred[1:, :] - pred[:-1, :]) - (gt[1:, :] - gt[:-1, :]), 0.0)
        value += float((np.sum(ex * ex) + np.sum(ey * ey)) / n_pairs)
        gx = 2.0 * ex / n_pairs
        gy = 2.0 * ey / n_pairs
        grad[:, 1:] += gx
        grad[:, :-1] -= gx
        grad[1:, :] += gy
        grad[:-1, :] -= gy
    return value, grad


def render_loss(pred_img: np.ndarray, gt_img: np.ndarray):
    pred_img = np.asarray(pred_img, dtype=np.float64)
    gt_img = np.asarray(gt_img, dtype=np.float64)
    if pred_img.shape != gt_img.shape:
        raise ValueError("image shapes differ")
    r = pred_img - gt_img
    return float(np.mean(r * r)), 2.0 * r / r.size


def _valid_count(valid, n):
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    P = int(valid.sum())
    if P == 0:
        raise NoValidPoints("no valid tracked points")
    return valid, P


def motion_point_loss(pred: np.ndarray, gt: np.ndarray, valid=None):
    """Mean over valid points of the L1 norm of the motion error."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    valid, P = _valid_count(valid, len(pred))
    diff = np.where(valid[:, None], pred - gt, 0.0)
    return float(np.abs(diff).sum() / P), np.sign(diff) / P


def motion_distribution_loss(pred: np.ndarray, gt: np.ndarray, valid=None):
    """Mean absolute difference of the Gram matrices of valid motions,
    diagonal included."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    valid, P = _valid_count(valid, len(pred))
    pv, gv = pred[valid], gt[valid]
    D = pv @ pv.T - gv @ gv.T
    value = float(np.abs(D).sum() / P**2)
    grad = np.zeros_like(pred)
    grad[valid] = 2.0 * np.sign(D) @ pv / P**2
    return value, grad


def combine(values: dict, weights: LossWeights) -> LossReport:
    w = weights
    d = values.get("depth", 0.0)
    r = values.get("render", 0.0)
    pt = values.get("motion_pt", 0.0)
    dist = values.get("motion_dist", 0.0)
    total = w.lambda_d * d + w.lambda_r * r + w.lambda_m * (w.lambda_pt * pt + w.lambda_dist * dist)
    return LossReport(total=float(total), depth=float(d), render=float(r),
                      motion_pt=float(pt), motion_dist=float(dist))


def total_loss(weights: LossWeights, *, render=None, depth=None, motion=None):
    """Weighted objective over whichever terms are supplied.

    ``render`` is ``(pred_img, gt_img)``, ``depth`` is ``(pred, gt, valid)``
    and ``motion`` is ``(pred, gt, valid)``.  Terms whose weight is zero are
    not evaluated.  Returns the report and a dict of gradients keyed
    ``render``, ``depth`` and ``motion``.
    """
    w = weights
    values, grads = {}, {}
    if render is not None and w.lambda_r > 0:
        values["render"], g = render_loss(*render)
        grads["render"] = w.lambda_r * g
    if depth is not None and w.lambda_d > 0:
        values["depth"], g = depth_loss(*depth)
        grads["depth"] = w.lambda_d * g
    if motion is not None and w.lambda_m > 0:
        g = 0.0
        if w.lambda_pt > 0:
            values["motion_pt"], gp = motion_point_loss(*motion)
            g = g + w.lambda_m * w.lambda_pt * gp
        if w.lambda_dist > 0:
            values["motion_dist"], gd = motion_distribution_loss(*motion)
            g = g + w.lambda_m * w.lambda_dist * gd
        if w.lambda_pt > 0 or w.lambda_dist > 0:
            grads["motion"] = g
    return combine(values, weights), grads
