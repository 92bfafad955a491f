"""Time-dependent deformation of splatter pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DegenerateQuaternion, EmptyField, MotionMap, OutOfRange, SplatterPixels

DEFAULT_FREQUENCIES = 8
DELTA_DIM = 10  # dx(3) + dlog_scale(3) + dq(4)


def encode_time(t, n_freqs: int = DEFAULT_FREQUENCIES) -> np.ndarray:
    """Sinusoidal encoding (sin 2^k pi t, cos 2^k pi t) for k < n_freqs.

    Accepts a scalar or an array of times; the encoding is the last axis.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise OutOfRange(f"time {t} outside [0, 1]")
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (2 * n_freqs,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class DeformationField:
    """Per-primitive deltas stored at keyframe times, linear in between."""

    keyframe_times: np.ndarray  # (K,)
    deltas: np.ndarray  # (K, G, 10)

    def __post_init__(self):
        self.keyframe_times = np.asarray(self.keyframe_times, dtype=np.float64).reshape(-1)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 3 or self.deltas.shape[2] != DELTA_DIM:
            raise ValueError(f"deltas must be (K, G, {DELTA_DIM}), got {self.deltas.shape}")
        if self.deltas.shape[0] != len(self.keyframe_times):
            raise ValueError("one delta slab per keyframe time is required")
        if np.any(np.diff(self.keyframe_times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")
        if len(self.keyframe_times) and (self.keyframe_times[0] < 0 or self.keyframe_times[-1] > 1):
            raise ValueError("keyframe times must lie in [0, 1]")

    @classmethod
    def zeros(cls, keyframe_times, n_gaussians: int) -> "DeformationField":
        kt = np.asarray(keyframe_times, dtype=np.float64)
        return cls(kt, np.zeros((len(kt), n_gaussians, DELTA_DIM)))

    @property
    def n_gaussians(self) -> int:
        return self.deltas.shape[1]

    def weights(self, t_q: float):
        """Keyframe indices and blend weights used at ``t_q``."""
        kt = self.keyframe_times
        if len(kt) == 0:
            raise EmptyField("deformation field has no keyframes")
        if t_q <= kt[0]:
            return 0, 0, 0.0
        if t_q >= kt[-1]:
            return len(kt) - 1, len(kt) - 1, 0.0
        hi = int(np.searchsorted(kt, t_q, side="right"))
        lo = hi - 1
        if kt[lo] == t_q:
            return lo, lo, 0.0
        w = (t_q - kt[lo]) / (kt[hi] - kt[lo])
        return lo, hi, float(w)


def evaluate_deformation(field: DeformationField, t_q: float):
    """(dx (G,3), da (G,7)) at ``t_q``: exact at keyframes, piecewise linear
    between them and held constant outside the keyframe range."""
    lo, hi, w = field.weights(t_q)
    if lo == hi:
        d = field.deltas[lo]
    else:
        d = (1.0 - w) * field.deltas[lo] + w * field.deltas[hi]
    return d[:, :3].copy(), d[:, 3:].copy()


def deform(pixels: SplatterPixels, delta) -> SplatterPixels:
    """x <- x + dx, log s <- log s + ds, q <- normalize(q + dq).

    Opacity and colour are left untouched.
    """
    dx, da = delta
    dx = np.asarray(dx, dtype=np.float64).reshape(-1, 3)
    da = np.asarray(da, dtype=np.float64).reshape(-1, 7)
    q = pixels.rotation + da[:, 3:]
    n = np.linalg.norm(q, axis=1)
    if np.any(n < 1e-8):
        bad = int(np.flatnonzero(n < 1e-8)[0])
        raise DegenerateQuaternion(f"rotation + delta has near-zero norm at primitive {bad}")
    return SplatterPixels(
        pixels.position + dx,
        q / n[:, None],
        pixels.log_scale + da[:, :3],
        pixels.opacity_logit.copy(),
        pixels.color.copy(),
    )


def motion_map_from_field(field: DeformationField, sources: np.ndarray, n_frames: int,
                          resolution, query_times) -> MotionMap:
    """Scatter per-primitive deltas onto their source pixels.

    ``sources`` is (G, 3) integer (frame, row, col).  Pixels without a
    primitive carry zero motion.
    """
    H, W = resolution
    qt = np.asarray(query_times, dtype=np.float64).reshape(-1)
    sources = np.asarray(sources, dtype=np.int64)
    disp = np.zeros((len(qt), n_frames, H, W, 3))
    attr = np.zeros((len(qt), n_frames, H, W, 7))
    f, r, c = sources[:, 0], sources[:, 1], sources[:, 2]
    for m, t in enumerate(qt):
        dx, da = evaluate_deformation(field, float(t))
        disp[m, f, r, c] = dx
        attr[m, f, r, c] = da
    return MotionMap(disp, attr, qt)
