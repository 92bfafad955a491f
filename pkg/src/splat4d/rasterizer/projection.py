"""EWA projection of 3D Gaussians to screen space, forward and adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Camera, SplatterPixels, sigmoid
from ..geometry import NEAR_PLANE

LOWPASS = 0.3
SIGMA_CUTOFF = 3.0
# Kernel is shifted and rescaled so it reaches zero exactly at the 3-sigma
# ellipse, which keeps the truncated density continuous.
KERNEL_FLOOR = float(np.exp(-0.5 * SIGMA_CUTOFF**2))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit w-x-y-z quaternions (G, 4) to rotation matrices (G, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: G[:, i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], axis=1)


@dataclass
class Projected:
    """Screen-space Gaussians plus the intermediates the adjoint needs.

    ``valid`` marks Gaussians in front of the near plane; ``visible`` further
    requires the 3-sigma footprint to touch at least one pixel center.
    """

    means: np.ndarray  # (G, 2)
    conics: np.ndarray  # (G, 3) inverse covariance (A, B, C)
    cov2d: np.ndarray  # (G, 2, 2)
    depths: np.ndarray  # (G,)
    radii: np.ndarray  # (G,) int
    opacities: np.ndarray
    colors: np.ndarray
    valid: np.ndarray
    visible: np.ndarray
    # intermediates
    p_cam: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    Rq: np.ndarray
    scale: np.ndarray
    cov3d: np.ndarray
    T: np.ndarray  # J @ W, (G, 2, 3)


def project_gaussians(pixels: SplatterPixels, camera: Camera) -> Projected:
    """EWA-project every Gaussian; nothing is dropped, culling is a mask."""
    W = camera.rotation
    p_cam = pixels.position @ W.T + camera.translation
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]

    qnorm = np.linalg.norm(pixels.rotation, axis=1)
    qn = pixels.rotation / np.where(qnorm > 0, qnorm, 1.0)[:, None]
    Rq = quat_to_rotmat(qn)
    s = np.exp(pixels.log_scale)
    M = Rq * s[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))

    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * x / zs**2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * y / zs**2
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(SIGMA_CUTOFF * np.sqrt(lam_max)).astype(np.int64)

    means = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    visible = valid.copy()
    if len(z):
        lo_u = np.ceil(means[:, 0] - radii - 0.5)
        hi_u = np.floor(means[:, 0] + radii - 0.5)
        lo_v = np.ceil(means[:, 1] - radii - 0.5)
        hi_v = np.floor(means[:, 1] + radii - 0.5)
        visible &= (hi_u >= 0) & (lo_u <= camera.width - 1) & (hi_v >= 0) & (lo_v <= camera.height - 1)
        visible &= lo_u <= hi_u
        visible &= lo_v <= hi_v
    radii = np.where(visible, radii, 0)

    return Projected(
        means=means, conics=conics, cov2d=cov2d, depths=z.copy(), radii=radii,
        opacities=sigmoid(pixels.opacity_logit), colors=np.clip(pixels.color, 0.0, 1.0),
        valid=valid, visible=visible, p_cam=p_cam, qn=qn, qnorm=qnorm, Rq=Rq,
        scale=s, cov3d=cov3d, T=T,
    )


def project_gaussians_backward(proj: Projected, pixels: SplatterPixels, camera: Camera,
                               g_means, g_conics, g_opac, g_colors, g_depths) -> dict:
    """Chain screen-space gradients back to the stored splatter parameters.

    ``g_conics`` holds derivatives with respect to the scalars (A, B, C) of
    the conic A*dx^2 + 2*B*dx*dy + C*dy^2.
    """
    W = camera.rotation
    fx, fy = camera.fx, camera.fy
    z = np.where(proj.valid, proj.p_cam[:, 2], 1.0)
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]

    # conic -> cov2d
    A, B, C = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    Q = np.empty((len(A), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = A, B, B, C
    gQ = np.empty_like(Q)
    gQ[:, 0, 0] = g_conics[:, 0]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * g_conics[:, 1]
    gQ[:, 1, 1] = g_conics[:, 2]
    g_cov2d = -Q @ gQ @ Q

    # cov2d = T Sigma T^T
    Tm = proj.T
    g_cov3d = np.transpose(Tm, (0, 2, 1)) @ g_cov2d @ Tm
    g_T = 2.0 * g_cov2d @ Tm @ proj.cov3d
    g_J = g_T @ W.T

    g_pcam = np.zeros_like(proj.p_cam)
    # mean2d
    g_pcam[:, 0] += g_means[:, 0] * fx / z
    g_pcam[:, 1] += g_means[:, 1] * fy / z
    g_pcam[:, 2] += -g_means[:, 0] * fx * x / z**2 - g_means[:, 1] * fy * y / z**2
    # Jacobian entries
    g_pcam[:, 0] += -g_J[:, 0, 2] * fx / z**2
    g_pcam[:, 1] += -g_J[:, 1, 2] * fy / z**2
    g_pcam[:, 2] += (-g_J[:, 0, 0] * fx / z**2 + g_J[:, 0, 2] * 2 * fx * x / z**3
                     - g_J[:, 1, 1] * fy / z**2 + g_J[:, 1, 2] * 2 * fy * y / z**3)
    g_pcam[:, 2] += g_depths
    g_pcam[~proj.valid] = 0.0
    g_position = g_pcam @ W

    # cov3d = (Rq S)(Rq S)^T
    M = proj.Rq * proj.scale[:, None, :]
    g_M = 2.0 * g_cov3d @ M
    g_Rq = g_M * proj.scale[:, None, :]
    g_s = np.einsum("nij,nij->nj", g_M, proj.Rq)
    g_log_scale = g_s * proj.scale
    g_qn = rotmat_grad_to_quat(proj.qn, g_Rq)
    qn = proj.qn
    g_rot = (g_qn - qn * np.sum(g_qn * qn, axis=1, keepdims=True)) / np.where(proj.qnorm > 0, proj.qnorm, 1.0)[:, None]

    o = proj.opacities
    g_logit = g_opac * o * (1.0 - o)
    inside = (pixels.color >= 0.0) & (pixels.color <= 1.0)
    g_color = g_colors * inside

    dead = ~proj.valid
    g_rot[dead] = 0.0
    g_log_scale[dead] = 0.0
    g_logit[dead] = 0.0
    g_color[dead] = 0.0
    return {
        "position": g_position,
        "rotation": g_rot,
        "log_scale": g_log_scale,
        "opacity_logit": g_logit,
        "color": g_color,
    }
