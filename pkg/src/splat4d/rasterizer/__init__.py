"""Differentiable Gaussian splatting.

``rasterize`` is the tile-based renderer used everywhere; ``reference_rasterize``
is a slow per-pixel implementation of the same contract kept as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import Camera, SplatterPixels
from ..motion import deform
from .projection import (
    KERNEL_FLOOR, LOWPASS, Projected, project_gaussians, project_gaussians_backward,
)
from .tiles import TILE, T_MIN, bin_gaussians, composite_backward, composite_forward, reduce_intersections

__all__ = [
    "Projected2DGaussian", "RenderOutput", "project_gaussian", "rasterize",
    "reference_rasterize", "rasterize_backward", "LOWPASS", "TILE", "T_MIN",
]


@dataclass(frozen=True)
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    radius: int


def project_gaussian(pixel: SplatterPixels, camera: Camera) -> Optional[Projected2DGaussian]:
    """Project a single primitive; ``None`` when it is culled."""
    if len(pixel) != 1:
        raise ValueError("project_gaussian takes exactly one primitive")
    p = project_gaussians(pixel, camera)
    if not p.visible[0]:
        return None
    return Projected2DGaussian(
        mean2d=p.means[0], cov2d=p.cov2d[0], depth=float(p.depths[0]),
        color=p.colors[0], alpha=float(p.opacities[0]), radius=int(p.radii[0]),
    )


@dataclass
class _Context:
    pixels: SplatterPixels  # after deformation
    camera: Camera
    proj: Projected
    offsets: np.ndarray
    ids: np.ndarray
    n_used: np.ndarray
    qsum_norm: Optional[np.ndarray]


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    background: np.ndarray
    ctx: Optional[_Context] = field(default=None, repr=False)


def _prepare(pixels, deform_delta):
    """Apply the deformation; also return the norm of q + dq (None if static)."""
    if deform_delta is None:
        return pixels, None
    dx, da = deform_delta
    qsum_norm = np.linalg.norm(pixels.rotation + np.asarray(da)[:, 3:], axis=1)
    return deform(pixels, (dx, da)), qsum_norm


def _depth_order(proj: Projected) -> np.ndarray:
    idx = np.flatnonzero(proj.visible)
    return idx[np.argsort(proj.depths[idx], kind="stable")]


def rasterize(pixels: SplatterPixels, camera: Camera, background=(0.0, 0.0, 0.0),
              deform_delta=None) -> RenderOutput:
    """Render RGB, alpha-weighted depth and alpha with 16x16 tiles.

    ``deform_delta`` is an optional ``(dx (G,3), da (G,7))`` pair applied to
    every primitive before projection.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    px, qsum_norm = _prepare(pixels, deform_delta)
    proj = project_gaussians(px, camera)
    order = _depth_order(proj)
    offsets, ids = bin_gaussians(order, proj.means, proj.radii, camera.width, camera.height, TILE)
    rgb, dep, alpha, n_used = composite_forward(
        offsets, ids, proj.means, proj.conics, proj.opacities, proj.colors, proj.depths,
        proj.radii, bg, camera.width, camera.height, TILE,
    )
    ctx = _Context(px, camera, proj, offsets, ids, n_used, qsum_norm)
    return RenderOutput(rgb, dep, alpha, bg, ctx)


def rasterize_backward(out: RenderOutput, grad_rgb=None, grad_depth=None, grad_alpha=None) -> dict:
    """Gradients of ``<grad_rgb, rgb> + <grad_depth, depth> + <grad_alpha, alpha>``.

    Keys: position, rotation, log_scale, opacity_logit, color and, when the
    forward pass was deformed, delta_position, delta_log_scale, delta_rotation.
    Rotation gradients are with respect to the stored (unnormalised) quaternion.
    """
    ctx = out.ctx
    if ctx is None:
        raise ValueError("render output carries no forward context")
    H, W = ctx.camera.height, ctx.camera.width
    g_rgb = np.zeros((H, W, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64)
    g_dep = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    g_alp = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    proj = ctx.proj
    n = len(ctx.pixels)
    buf = composite_backward(
        ctx.offsets, ctx.ids, proj.means, proj.conics, proj.opacities, proj.colors, proj.depths,
        proj.radii, out.background, W, H, TILE, ctx.n_used, g_rgb, g_dep, g_alp,
    )
    per_g = reduce_intersections(ctx.ids, buf, n)
    grads = project_gaussians_backward(
        proj, ctx.pixels, ctx.camera,
        per_g[:, 0:2], per_g[:, 2:5], per_g[:, 5], per_g[:, 6:9], per_g[:, 9],
    )
    if ctx.qsum_norm is not None:
        grads = _through_deformation(grads, ctx)
    return grads


def _through_deformation(grads: dict, ctx: _Context) -> dict:
    # The deformed rotation is normalize(q + dq) and already has unit norm, so
    # the projection adjoint returned the tangent part only; rescale by the
    # norm of the sum to get d/d(q + dq), shared by q and dq.
    out = dict(grads)
    g_sum = grads["rotation"] / ctx.qsum_norm[:, None]
    out["rotation"] = g_sum
    out["delta_position"] = grads["position"].copy()
    out["delta_log_scale"] = grads["log_scale"].copy()
    out["delta_rotation"] = g_sum.copy()
    return out


def reference_rasterize(pixels: SplatterPixels, camera: Camera, background=(0.0, 0.0, 0.0),
                        deform_delta=None) -> RenderOutput:
    """Per-pixel compositing over every Gaussian: no tiles, no footprint
    culling and no early termination."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    px, _ = _prepare(pixels, deform_delta)
    proj = project_gaussians(px, camera)
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    T = np.ones((H, W))
    rgb = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    idx = np.flatnonzero(proj.valid)
    for g in idx[np.argsort(proj.depths[idx], kind="stable")]:
        dx = uu - proj.means[g, 0]
        dy = vv - proj.means[g, 1]
        A, B, C = proj.conics[g]
        m = A * dx * dx + 2 * B * dx * dy + C * dy * dy
        G = np.where(m < 9.0, (np.exp(-0.5 * m) - KERNEL_FLOOR) / (1 - KERNEL_FLOOR), 0.0)
        a = proj.opacities[g] * G
        w = a * T
        rgb += w[..., None] * proj.colors[g]
        dep += w * proj.depths[g]
        T = T * (1 - a)
    rgb += T[..., None] * bg
    return RenderOutput(rgb, dep, 1 - T, bg)
