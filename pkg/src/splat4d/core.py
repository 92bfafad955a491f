"""Shared domain types: splatter pixels, cameras, scene bundles and tracks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class Splat4DError(ValueError):
    """Base class for every error raised by this package."""


class NoValidPoints(Splat4DError):
    pass


class NoValidPixels(Splat4DError):
    pass


class NoValidEntries(Splat4DError):
    pass


class OutOfRange(Splat4DError):
    pass


class EmptyField(Splat4DError):
    pass


class DegenerateQuaternion(Splat4DError):
    pass


class AllZeroNorms(Splat4DError):
    pass


class NonFiniteGradient(Splat4DError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group '{group}'")
        self.group = group


@dataclass
class SplatterPixels:
    """A batch of Gaussian primitives stored in their unconstrained form.

    ``rotation`` is a w-x-y-z quaternion (any non-zero norm), ``log_scale``
    is the log of the per-axis extent and ``opacity_logit`` is pre-sigmoid.
    ``color`` is plain RGB in [0, 1].
    """

    position: np.ndarray  # (G, 3)
    rotation: np.ndarray  # (G, 4)
    log_scale: np.ndarray  # (G, 3)
    opacity_logit: np.ndarray  # (G,)
    color: np.ndarray  # (G, 3)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(-1, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(-1, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(-1)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        n = len(self.position)
        for name in ("rotation", "log_scale", "opacity_logit", "color"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.position)

    def __getitem__(self, idx) -> "SplatterPixels":
        return SplatterPixels(
            self.position[idx], self.rotation[idx], self.log_scale[idx],
            self.opacity_logit[idx], self.color[idx],
        )

    def copy(self) -> "SplatterPixels":
        return SplatterPixels(
            self.position.copy(), self.rotation.copy(), self.log_scale.copy(),
            self.opacity_logit.copy(), self.color.copy(),
        )

    @classmethod
    def empty(cls) -> "SplatterPixels":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, parts: Sequence["SplatterPixels"]) -> "SplatterPixels":
        return cls(
            np.concatenate([p.position for p in parts]),
            np.concatenate([p.rotation for p in parts]),
            np.concatenate([p.log_scale for p in parts]),
            np.concatenate([p.opacity_logit for p in parts]),
            np.concatenate([p.color for p in parts]),
        )


@dataclass(frozen=True)
class Activated:
    rotation: np.ndarray  # unit quaternions
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def activate(pixels: SplatterPixels) -> Activated:
    """Map stored parameters to their constrained rendering values."""
    return Activated(
        rotation=normalize_quaternion(pixels.rotation),
        scale=np.exp(pixels.log_scale),
        opacity=sigmoid(pixels.opacity_logit),
        color=np.clip(pixels.color, 0.0, 1.0),
    )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_pose(self, rotation, translation) -> "Camera":
        return replace(self, rotation=rotation, translation=translation)

    @classmethod
    def from_intrinsics(cls, K, rotation=None, translation=None, width=0, height=0, timestamp=0.0):
        K = np.asarray(K, dtype=np.float64)
        return cls(
            np.eye(3) if rotation is None else rotation,
            np.zeros(3) if translation is None else translation,
            float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
            int(width), int(height), float(timestamp),
        )


@dataclass
class TrackSet:
    points: np.ndarray  # (P, N, 3) world positions
    visibility: np.ndarray  # (P, N) bool

    def __post_init__(self):
        self.points = np.asarray(self.points)
        self.visibility = np.asarray(self.visibility, dtype=bool)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class SceneBundle:
    frames: list  # N arrays (H, W, 3) in [0, 1]
    cameras: list  # N Camera
    depths: Optional[list] = None  # N arrays (H, W); <= 0 is invalid
    tracks: Optional[TrackSet] = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple:
        return tuple(np.shape(self.frames[0])[:2])

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([c.timestamp for c in self.cameras], dtype=np.float64)


@dataclass
class MotionMap:
    displacements: np.ndarray  # (M, N, H, W, 3)
    attr_deltas: np.ndarray  # (M, N, H, W, 7)
    query_times: np.ndarray = field(default_factory=lambda: np.zeros(0))


def validate_scene(bundle: SceneBundle) -> list:
    """Check every bundle invariant; return human-readable violations."""
    problems = []
    if len(bundle.cameras) != len(bundle.frames):
        problems.append(
            f"cameras: length {len(bundle.cameras)} does not match frames length {len(bundle.frames)}"
        )
    shape = None
    for i, frame in enumerate(bundle.frames):
        frame = np.asarray(frame)
        if frame.ndim != 3 or frame.shape[2] != 3:
            problems.append(f"frame {i}: expected HxWx3, got {frame.shape}")
            continue
        if shape is None:
            shape = frame.shape[:2]
        elif frame.shape[:2] != shape:
            problems.append(f"frame {i}: resolution {frame.shape[:2]} differs from {shape}")
        if frame.size and (frame.min() < 0.0 or frame.max() > 1.0):
            problems.append(f"frame {i}: values outside [0,1]")

    for i, cam in enumerate(bundle.cameras):
        R = cam.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            problems.append(f"camera {i}: rotation not orthonormal")
        elif abs(np.linalg.det(R) - 1.0) > 1e-6:
            problems.append(f"camera {i}: improper rotation")
        if not (cam.fx > 0 and cam.fy > 0):
            problems.append(f"camera {i}: focal lengths must be positive")
        if not (0.0 <= cam.timestamp <= 1.0):
            problems.append(f"camera {i}: timestamp {cam.timestamp} outside [0,1]")
        if shape is not None and (cam.height, cam.width) != tuple(shape):
            problems.append(f"camera {i}: size {(cam.height, cam.width)} differs from frames {tuple(shape)}")

    times = [c.timestamp for c in bundle.cameras]
    for i in range(1, len(times)):
        if not times[i] > times[i - 1]:
            problems.append(f"timestamps not strictly increasing at index {i}")

    if bundle.depths is not None:
        if len(bundle.depths) != len(bundle.frames):
            problems.append(f"depths: length {len(bundle.depths)} does not match frames length {len(bundle.frames)}")
        for i, d in enumerate(bundle.depths):
            if shape is not None and np.shape(d) != tuple(shape):
                problems.append(f"depth {i}: shape {np.shape(d)} differs from {tuple(shape)}")

    if bundle.tracks is not None:
        P = bundle.tracks.points
        if P.ndim != 3 or P.shape[2] != 3:
            problems.append(f"tracks: points must be PxNx3, got {P.shape}")
        else:
            if P.shape[1] != len(bundle.frames):
                problems.append(f"tracks: {P.shape[1]} frames, expected {len(bundle.frames)}")
            if bundle.tracks.visibility.shape != P.shape[:2]:
                problems.append(f"tracks: visibility shape {bundle.tracks.visibility.shape} != {P.shape[:2]}")
    return problems
