"""Rigid transforms, pinhole projection, Pluecker rays and scene scale."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Camera, NoValidPoints, SceneBundle, TrackSet

NEAR_PLANE = 1e-4


def transform_points(points: np.ndarray, camera: Camera) -> np.ndarray:
    """World points (K, 3) to the camera frame."""
    points = np.asarray(points, dtype=np.float64)
    return points @ camera.rotation.T + camera.translation


def project(points_cam: np.ndarray, K) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return pixel coordinates (K, 2), depths (K,) and a validity flag.

    Points at or behind the near plane are flagged invalid; their pixel
    coordinates are NaN.
    """
    if isinstance(K, Camera):
        K = K.intrinsics
    points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = points_cam[:, 2]
    valid = z > NEAR_PLANE
    safe_z = np.where(valid, z, 1.0)
    u = K[0, 0] * points_cam[:, 0] / safe_z + K[0, 2]
    v = K[1, 1] * points_cam[:, 1] / safe_z + K[1, 2]
    uv = np.stack([u, v], axis=1)
    uv[~valid] = np.nan
    return uv, z.copy(), valid


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) sample positions at pixel centers."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def camera_rays(camera: Camera) -> np.ndarray:
    """Per-pixel ray directions in world space, scaled to unit camera-z."""
    uv = pixel_centers(camera.width, camera.height)
    d_cam = np.empty(uv.shape[:2] + (3,))
    d_cam[..., 0] = (uv[..., 0] - camera.cx) / camera.fx
    d_cam[..., 1] = (uv[..., 1] - camera.cy) / camera.fy
    d_cam[..., 2] = 1.0
    return d_cam @ camera.rotation  # R^T d per pixel


def unproject_depth(depth: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Lift a z-depth map to world points; non-positive depth is masked out."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    pts = camera.center + camera_rays(camera) * depth[..., None]
    pts[~valid] = 0.0
    return pts, valid


@dataclass(frozen=True)
class PluckerMap:
    rays: np.ndarray  # (H, W, 6): direction then moment

    @property
    def directions(self) -> np.ndarray:
        return self.rays[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.rays[..., 3:]


def plucker_embedding(camera: Camera) -> PluckerMap:
    d = camera_rays(camera)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)
    m = np.cross(o, d)
    return PluckerMap(np.concatenate([d, m], axis=-1))


@dataclass(frozen=True)
class NormalizationRecord:
    scale: float
    applied_to: str = "camera translations, depths, track points"

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale


def scene_points(bundle: SceneBundle) -> np.ndarray:
    """All valid unprojected depth points of every frame, stacked."""
    if bundle.depths is None:
        return np.zeros((0, 3))
    chunks = []
    for depth, cam in zip(bundle.depths, bundle.cameras):
        pts, valid = unproject_depth(depth, cam)
        chunks.append(pts[valid])
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def normalize_scene(bundle: SceneBundle, points: np.ndarray | None = None):
    """Rescale a bundle so the mean distance of ``points`` to the origin is 1.

    ``points`` defaults to every valid depth point of the bundle.  Returns the
    rescaled bundle and the record of the divisor.
    """
    if points is None:
        points = scene_points(bundle)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise NoValidPoints("no valid depth points to normalize the scene")
    scale = float(np.mean(np.linalg.norm(points, axis=1)))
    if not scale > 0:
        raise NoValidPoints("all points sit at the origin")
    cams = [replace(c, translation=c.translation / scale) for c in bundle.cameras]
    depths = None
    if bundle.depths is not None:
        depths = [np.where(np.asarray(d) > 0, np.asarray(d, dtype=np.float64) / scale, np.asarray(d, dtype=np.float64))
                  for d in bundle.depths]
    tracks = None
    if bundle.tracks is not None:
        tracks = TrackSet(np.asarray(bundle.tracks.points, dtype=np.float64) / scale, bundle.tracks.visibility.copy())
    out = SceneBundle(list(bundle.frames), cams, depths, tracks)
    return out, NormalizationRecord(scale)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye``.

    Camera axes follow the pinhole convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = axis / n
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)
