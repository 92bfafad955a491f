"""Image and tracking metrics, plus scene flow and motion segmentation read
off a fitted motion map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import AllZeroNorms, Camera, MotionMap, NoValidEntries, TrackSet
from .geometry import project, transform_points
from .motion import motion_map_from_field

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA, SSIM_TAPS = 1.5, 11


def psnr(pred, gt, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    With ``mask`` (H x W), only masked pixels contribute.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    err = (pred - gt) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise NoValidEntries("mask selects no pixels")
        err = err[mask]
    mse = float(np.mean(err))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window():
    x = np.arange(SSIM_TAPS) - SSIM_TAPS // 2
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _filter_valid(img, w):
    # separable filter, keeping only positions where the window fits
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(pred, gt) -> np.ndarray:
    """Per-position SSIM (channel-averaged) over the valid window area."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    if min(pred.shape[:2]) < SSIM_TAPS:
        raise ValueError(f"images must be at least {SSIM_TAPS} pixels on each side")
    w = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    maps = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return np.mean(maps, axis=0)


def ssim(pred, gt, mask=None) -> float:
    """Gaussian-window SSIM averaged over channels; ``mask`` restricts the
    average to window centres inside the mask."""
    m = ssim_map(pred, gt)
    if mask is None:
        return float(m.mean())
    half = SSIM_TAPS // 2
    mask = np.asarray(mask, dtype=bool)[half:-half, half:-half]
    if not mask.any():
        raise NoValidEntries("mask selects no window centres")
    return float(m[mask].mean())


def normalize_by_median(points):
    """Divide points by the median of their norms; returns (points, scale)."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("need at least one point")
    scale = float(np.median(np.linalg.norm(points.reshape(-1, 3), axis=1)))
    if scale == 0.0:
        raise AllZeroNorms("median point norm is zero")
    return points / scale, scale


@dataclass(frozen=True)
class TrackingMetrics:
    epe3d: float
    delta_005: float
    delta_010: float

    def as_dict(self) -> dict:
        return {"epe3d": self.epe3d, "delta_005": self.delta_005, "delta_010": self.delta_010}


def tracking_metrics(pred, gt, valid=None) -> TrackingMetrics:
    """End-point error and threshold accuracies over valid (point, frame)
    entries, averaged globally."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    err = np.linalg.norm(pred - gt, axis=-1)
    if valid is not None:
        err = err[np.asarray(valid, dtype=bool)]
    err = err.reshape(-1)
    if err.size == 0:
        raise NoValidEntries("no valid track entries")
    return TrackingMetrics(float(err.mean()), float(np.mean(err < 0.05)), float(np.mean(err < 0.10)))


def evaluate_tracks(pred, gt, valid) -> TrackingMetrics:
    """Median-normalise prediction and ground truth separately over their
    valid entries, then score."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise NoValidEntries("no valid track entries")
    _, sp = normalize_by_median(np.asarray(pred)[valid])
    _, sg = normalize_by_median(np.asarray(gt)[valid])
    return tracking_metrics(np.asarray(pred) / sp, np.asarray(gt) / sg, valid)


def track_query_pixels(tracks: TrackSet, cameras) -> np.ndarray:
    """(P, 3) integer (frame, row, col) anchoring each track: the visible
    frame where its projection lies closest to a pixel centre."""
    P, N = tracks.visibility.shape
    best = np.full(P, np.inf)
    out = np.full((P, 3), -1, dtype=np.int64)
    for j, cam in enumerate(cameras):
        uv, _, ok = project(transform_points(tracks.points[:, j], cam), cam)
        ok &= tracks.visibility[:, j]
        uv = np.where(ok[:, None], uv, 0.0)
        col = np.floor(uv[:, 0]).astype(np.int64)
        row = np.floor(uv[:, 1]).astype(np.int64)
        ok &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        dist = np.hypot(uv[:, 0] - col - 0.5, uv[:, 1] - row - 0.5)
        take = ok & (dist < best)
        best[take] = dist[take]
        out[take] = np.stack([np.full(int(take.sum()), j), row[take], col[take]], axis=1)
    return out


def predict_tracks(positions, motion: MotionMap, anchors) -> tuple[np.ndarray, np.ndarray]:
    """Trajectories (P, M, 3) of the anchored pixels at every query time.

    ``positions`` is the (N, H, W, 3) map of canonical pixel positions.
    Returns the trajectories and a (P,) mask of anchored tracks.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    ok = anchors[:, 0] >= 0
    f, r, c = (np.where(ok, anchors[:, k], 0) for k in range(3))
    base = np.asarray(positions)[f, r, c]
    disp = motion.displacements[:, f, r, c]  # (M, P, 3)
    return base[:, None, :] + np.transpose(disp, (1, 0, 2)), ok


def fitted_track_metrics(positions, field, sources, cameras, tracks: TrackSet, resolution):
    """Score a fitted model on ground-truth tracks.

    Each track is anchored at its best-centred visible pixel, followed through
    the model's motion toward every input timestamp and compared after
    separate median normalisation.  ``positions`` is (G, 3) canonical
    primitive positions, ``sources`` their (frame, row, col).  Returns the
    metrics and the number of anchored tracks.
    """
    n = len(cameras)
    H, W = resolution
    sources = np.asarray(sources, dtype=np.int64)
    pos_map = np.zeros((n, H, W, 3))
    has = np.zeros((n, H, W), dtype=bool)
    pos_map[sources[:, 0], sources[:, 1], sources[:, 2]] = positions
    has[sources[:, 0], sources[:, 1], sources[:, 2]] = True
    anchors = track_query_pixels(tracks, cameras)
    hit = anchors[:, 0] >= 0
    hit[hit] = has[anchors[hit, 0], anchors[hit, 1], anchors[hit, 2]]
    anchors[~hit] = -1
    times = [c.timestamp for c in cameras]
    motion = motion_map_from_field(field, sources, n, resolution, times)
    pred, ok = predict_tracks(pos_map, motion, anchors)
    return evaluate_tracks(pred, tracks.points, tracks.visibility & ok[:, None]), int(ok.sum())


@dataclass(frozen=True)
class FlowMap:
    flow: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W)


def scene_flow(displacement, points, camera_i: Camera, camera_q: Camera, valid=None) -> FlowMap:
    """Image-space flow from frame i's pixels to the view of ``camera_q``.

    ``displacement`` and ``points`` are (H, W, 3) world-space maps for frame
    i.  Flow is zero wherever either endpoint is behind its camera.
    """
    points = np.asarray(points, dtype=np.float64)
    disp = np.asarray(displacement, dtype=np.float64)
    H, W = points.shape[:2]
    # measured from the point's own projection (the pixel centre up to
    # rounding) so zero motion under the same camera gives exactly zero
    uv_i, _, ok_i = project(transform_points(points.reshape(-1, 3), camera_i), camera_i)
    uv_q, _, ok_q = project(transform_points((points + disp).reshape(-1, 3), camera_q), camera_q)
    ok = ok_q & ok_i
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool).reshape(-1)
    flow = np.where(ok[:, None], np.nan_to_num(uv_q) - np.nan_to_num(uv_i), 0.0)
    return FlowMap(flow.reshape(H, W, 2), ok.reshape(H, W))


def segment_moving(displacement, threshold: float) -> np.ndarray:
    """Pixels whose motion norm exceeds ``threshold`` (scene units)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return np.linalg.norm(np.asarray(displacement, dtype=np.float64), axis=-1) > threshold


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def angular_error_deg(flow, ref) -> np.ndarray:
    """Angle between flow vectors in degrees (NaN where either is zero)."""
    flow = np.asarray(flow, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    nf = np.linalg.norm(flow, axis=-1)
    nr = np.linalg.norm(ref, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.sum(flow * ref, axis=-1) / (nf * nr)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
