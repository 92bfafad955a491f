"""Per-scene optimisation of dynamic splatter pixels.

One primitive is lifted from every (strided) valid depth pixel of every
frame.  Each iteration renders one input camera at its own timestamp with all
primitives deformed to that time, then steps Adam on the weighted sum of the
render, depth and track-motion losses.

Two motion parameterisations are supported:

``field``
    free per-primitive deltas stored at the input timestamps.
``head``
    deltas produced by a shared time-conditioned MLP from per-pixel features,
    ``(t_q - t_src) * head(f, t_q)``, so a primitive never moves at the time
    of its own frame.  The head is baked into a keyframe field after fitting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import NoValidPixels, NonFiniteGradient, SceneBundle, SplatterPixels, TrackSet, logit
from .geometry import camera_rays, plucker_embedding, transform_points, unproject_depth
from .head import ToyMotionHead, toy_head_backward, toy_head_forward
from .losses import LossReport, LossWeights, combine, depth_loss, motion_distribution_loss, \
    motion_point_loss, render_loss
from .evalapps import TrackingMetrics, fitted_track_metrics
from .motion import DEFAULT_FREQUENCIES, DELTA_DIM, DeformationField, encode_time
from .optim import AdamState, adam_step
from .rasterizer import rasterize, rasterize_backward

SCENE_GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "color")
MAX_NONFINITE = 10
TRACK_DEPTH_TOL = 0.03  # relative depth agreement for track-to-pixel lookup


@dataclass
class FitConfig:
    iterations: int = 2000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity_logit: float = 5e-2
    lr_color: float = 2.5e-3
    lr_deformation: float = 1.6e-4
    lr_head: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    subsample: int = 1
    motion_model: str = "head"  # head | field
    head_hidden: int = 64
    head_cond_std: float = 0.0
    n_freqs: int = DEFAULT_FREQUENCIES
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0
    pixel_aligned: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        for k, v in self.learning_rates().items():
            if not v > 0:
                raise ValueError(f"learning rate for {k} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.subsample < 1:
            raise ValueError("subsample must be at least 1")
        if self.motion_model not in ("head", "field"):
            raise ValueError("motion_model must be 'head' or 'field'")

    def learning_rates(self) -> dict:
        return {
            "position": self.lr_position, "rotation": self.lr_rotation,
            "log_scale": self.lr_log_scale, "opacity_logit": self.lr_opacity_logit,
            "color": self.lr_color, "deformation": self.lr_deformation, "head": self.lr_head,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**known)


@dataclass
class FitResult:
    pixels: SplatterPixels
    field: DeformationField
    sources: np.ndarray  # (G, 3) frame, row, col
    history: list = field(default_factory=list)  # LossReport per iteration
    head: Optional[ToyMotionHead] = None


def init_from_depth(bundle: SceneBundle, stride: int = 1):
    """Splatter pixels lifted from every ``stride``-th valid depth pixel.

    Returns the pixels, a zero deformation field keyed at the frame
    timestamps and the (frame, row, col) source of each primitive.
    """
    if bundle.depths is None:
        raise NoValidPixels("scene has no depth maps")
    parts, sources = [], []
    for i, (img, depth, cam) in enumerate(zip(bundle.frames, bundle.depths, bundle.cameras)):
        pts, valid = unproject_depth(depth, cam)
        pts, valid = pts[::stride, ::stride], valid[::stride, ::stride]
        rows, cols = np.nonzero(valid)
        if len(rows) == 0:
            continue
        spacing = _local_spacing(pts, valid, np.asarray(depth)[::stride, ::stride] * stride / cam.fx)
        n = len(rows)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        parts.append(SplatterPixels(
            pts[rows, cols],
            rot,
            np.repeat(np.log(0.5 * spacing[rows, cols])[:, None], 3, axis=1),
            np.full(n, logit(0.1)),
            np.clip(np.asarray(img, dtype=np.float64)[::stride, ::stride][rows, cols], 0.0, 1.0),
        ))
        sources.append(np.stack([np.full(n, i), rows * stride, cols * stride], axis=1))
    if not parts:
        raise NoValidPixels("no valid depth pixels to initialise from")
    pixels = SplatterPixels.concatenate(parts)
    field_ = DeformationField.zeros(bundle.timestamps, len(pixels))
    return pixels, field_, np.concatenate(sources).astype(np.int64)


def _local_spacing(pts, valid, fallback):
    """Smallest distance to a valid 4-neighbour; ``fallback`` if isolated."""
    H, W = valid.shape
    best = np.full((H, W), np.inf)
    for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
        r0, r1 = max(dr, 0), H + min(dr, 0)
        c0, c1 = max(dc, 0), W + min(dc, 0)
        nb_pts = pts[r0:r1, c0:c1]
        nb_ok = valid[r0:r1, c0:c1]
        here = (slice(r0 - dr, r1 - dr), slice(c0 - dc, c1 - dc))
        d = np.linalg.norm(nb_pts - pts[here], axis=-1)
        ok = nb_ok & valid[here]
        best[here] = np.where(ok, np.minimum(best[here], d), best[here])
    out = np.where(np.isfinite(best) & (best > 0), best, fallback)
    return np.where(out > 0, out, 1.0)


def _source_rays(bundle: SceneBundle, sources):
    """Camera centre and unit-z world ray of each primitive's source pixel."""
    f, r, c = sources[:, 0], sources[:, 1], sources[:, 2]
    rays = np.stack([camera_rays(cam) for cam in bundle.cameras])[f, r, c]
    origins = np.stack([cam.center for cam in bundle.cameras])[f]
    return origins, rays


def source_index(sources: np.ndarray, n_frames: int, resolution) -> np.ndarray:
    """(N, H, W) map from source pixel to primitive index, -1 where none."""
    H, W = resolution
    idx = np.full((n_frames, H, W), -1, dtype=np.int64)
    s = np.asarray(sources, dtype=np.int64)
    idx[s[:, 0], s[:, 1], s[:, 2]] = np.arange(len(s))
    return idx


def pixel_features(bundle: SceneBundle, sources: np.ndarray, n_freqs: int = DEFAULT_FREQUENCIES) -> np.ndarray:
    """Head input per primitive: Plücker ray (6), colour (3), depth (1),
    world position (3) and the encoding of its frame's timestamp."""
    f, r, c = sources[:, 0], sources[:, 1], sources[:, 2]
    rays = np.stack([plucker_embedding(cam).rays for cam in bundle.cameras])
    colors = np.stack([np.asarray(im, dtype=np.float64) for im in bundle.frames])
    depths = np.stack([np.asarray(d, dtype=np.float64) for d in bundle.depths])
    pts = np.stack([unproject_depth(d, cam)[0] for d, cam in zip(bundle.depths, bundle.cameras)])
    t_src = bundle.timestamps[f]
    return np.concatenate([
        rays[f, r, c], colors[f, r, c], depths[f, r, c][:, None], pts[f, r, c],
        encode_time(t_src, n_freqs),
    ], axis=1)


def track_lookup(tracks: TrackSet, bundle: SceneBundle, index: np.ndarray) -> np.ndarray:
    """(P, N) primitive index seen by each visible track point, or -1.

    A track point maps to the primitive of the pixel containing its
    projection, provided the depth map agrees with the track depth.
    """
    P, N = tracks.visibility.shape
    H, W = bundle.resolution
    out = np.full((P, N), -1, dtype=np.int64)
    for j, cam in enumerate(bundle.cameras):
        pc = transform_points(tracks.points[:, j], cam)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            v = cam.fy * pc[:, 1] / z + cam.cy
        ok = tracks.visibility[:, j] & (z > 0) & np.isfinite(u) & np.isfinite(v)
        col = np.floor(np.where(ok, u, -1)).astype(np.int64)
        row = np.floor(np.where(ok, v, -1)).astype(np.int64)
        ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
        rr, cc = np.where(ok, row, 0), np.where(ok, col, 0)
        d = np.asarray(bundle.depths[j])[rr, cc]
        ok &= np.abs(d - z) <= TRACK_DEPTH_TOL * np.abs(z)
        g = index[j, rr, cc]
        out[:, j] = np.where(ok, g, -1)
    return out


class _HeadMotion:
    """Delta provider built on the toy head."""

    def __init__(self, head: ToyMotionHead, features, t_src):
        self.head = head
        self.features = features
        self.t_src = t_src
        self._cache = None

    def forward(self, t_q):
        dx, da, cache = toy_head_forward(self.head, self.features, t_q)
        lag = (t_q - self.t_src)[:, None]
        self._cache = (cache, lag)
        return lag * dx, lag * da

    def backward(self, g_dx, g_da) -> dict:
        cache, lag = self._cache
        g = toy_head_backward(self.head, cache, lag * g_dx, lag * g_da)
        return {f"head.{k}": v for k, v in g.items()}


def _motion_terms(delta_x, lookup, tracks, q, weights):
    """Track-motion loss toward frame ``q`` averaged over source frames.

    Returns (point value, distribution value, gradient on delta_x) or
    ``None`` when no source frame has a valid pair.
    """
    P, N = lookup.shape
    w = weights
    pt_vals, dist_vals, grads = [], [], []
    for i in range(N):
        if i == q:
            continue
        ok = (lookup[:, i] >= 0) & tracks.visibility[:, q]
        if not ok.any():
            continue
        g_idx = lookup[ok, i]
        gt = tracks.points[ok, q] - tracks.points[ok, i]
        pred = delta_x[g_idx]
        g = np.zeros_like(pred)
        v_pt = v_dist = 0.0
        if w.lambda_pt > 0:
            v_pt, gp = motion_point_loss(pred, gt)
            g += w.lambda_pt * gp
        if w.lambda_dist > 0:
            v_dist, gd = motion_distribution_loss(pred, gt)
            g += w.lambda_dist * gd
        pt_vals.append(v_pt)
        dist_vals.append(v_dist)
        grads.append((g_idx, g))
    if not grads:
        return None
    n = len(grads)
    full = np.zeros_like(delta_x)
    for g_idx, g in grads:
        np.add.at(full, g_idx, w.lambda_m * g / n)
    return float(np.mean(pt_vals)), float(np.mean(dist_vals)), full


def _split_delta_grads(grads):
    return grads["delta_position"], np.concatenate([grads["delta_log_scale"], grads["delta_rotation"]], axis=1)


def fit_scene(bundle: SceneBundle, config: FitConfig | None = None,
              on_checkpoint: Optional[Callable[[int, FitResult], None]] = None) -> FitResult:
    """Fit dynamic splatter pixels to a normalised scene bundle."""
    cfg = config or FitConfig()
    w = cfg.weights
    rng = np.random.default_rng(cfg.seed)
    pixels, field_, sources = init_from_depth(bundle, cfg.subsample)
    G, N = len(pixels), bundle.n_frames
    times = bundle.timestamps
    src_frame = sources[:, 0]
    index = source_index(sources, N, bundle.resolution)
    tracks = bundle.tracks
    lookup = track_lookup(tracks, bundle, index) if tracks is not None and w.lambda_m > 0 else None

    params = {k: getattr(pixels, k) for k in SCENE_GROUPS}
    lr_cfg = cfg.learning_rates()
    lr = {k: lr_cfg[k] for k in SCENE_GROUPS}
    if cfg.pixel_aligned:
        # each centre slides along its source pixel's ray: x = o + z * r
        origins, rays = _source_rays(bundle, sources)
        del params["position"], lr["position"]
        params["depth"] = np.einsum("gk,gk->g", pixels.position - origins, rays) / np.einsum("gk,gk->g", rays, rays)
        lr["depth"] = lr_cfg["position"]
    mover = None
    if cfg.motion_model == "field":
        params["deformation"] = field_.deltas
        lr["deformation"] = lr_cfg["deformation"]
    else:
        feats = pixel_features(bundle, sources, cfg.n_freqs)
        head = ToyMotionHead.init(feats.shape[1], cfg.head_hidden, cfg.n_freqs, rng=rng,
                                  cond_std=cfg.head_cond_std)
        head.set_feature_stats(feats)
        mover = _HeadMotion(head, feats, times[src_frame])
        for k, v in head.params.items():
            params[f"head.{k}"] = v
            lr[f"head.{k}"] = lr_cfg["head"]

    state = AdamState()
    history: list[LossReport] = []
    failures = 0
    depth_valid = [np.asarray(d) > 0 for d in bundle.depths]
    result = FitResult(pixels, field_, sources, history, mover.head if mover else None)
    for it in range(cfg.iterations):
        j = int(rng.integers(N))
        cam = bundle.cameras[j]
        if mover is None:
            delta = field_.deltas[j]
            dx, da = delta[:, :3], delta[:, 3:]
        else:
            dx, da = mover.forward(times[j])
        out = rasterize(pixels, cam, cfg.background, deform_delta=(dx, da))

        values = {}
        g_rgb = g_dep = None
        if w.lambda_r > 0:
            values["render"], g = render_loss(out.rgb, bundle.frames[j])
            g_rgb = w.lambda_r * g
        if w.lambda_d > 0:
            values["depth"], g = depth_loss(out.depth, bundle.depths[j], depth_valid[j])
            g_dep = w.lambda_d * g
        motion = None
        if lookup is not None:
            motion = _motion_terms(dx, lookup, tracks, j, w)
            if motion is not None:
                values["motion_pt"], values["motion_dist"] = motion[0], motion[1]
        report = combine(values, w)

        grads = rasterize_backward(out, g_rgb, g_dep)
        g_dx, g_da = _split_delta_grads(grads)
        if motion is not None:
            g_dx = g_dx + motion[2]
        step_grads = {k: grads[k] for k in SCENE_GROUPS if k in params}
        if cfg.pixel_aligned:
            step_grads["depth"] = np.einsum("gk,gk->g", grads["position"], rays)
        if mover is None:
            gd = np.zeros_like(field_.deltas)
            own = src_frame != j
            gd[j, own, :3] = g_dx[own]
            gd[j, own, 3:] = g_da[own]
            step_grads["deformation"] = gd
        else:
            step_grads.update(mover.backward(g_dx, g_da))
        try:
            adam_step(params, step_grads, state, lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            failures = 0
            if cfg.pixel_aligned:
                pixels.position[:] = origins + params["depth"][:, None] * rays
        except NonFiniteGradient:
            failures += 1
            if failures >= MAX_NONFINITE:
                raise
        history.append(report)
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            if mover is not None:
                result.field = bake_head(mover, times)
            on_checkpoint(it + 1, result)

    if mover is not None:
        result.field = bake_head(mover, times)
    return result


def bake_head(mover: _HeadMotion, times) -> DeformationField:
    deltas = np.zeros((len(times), len(mover.features), DELTA_DIM))
    for k, t in enumerate(times):
        dx, da = mover.forward(float(t))
        deltas[k, :, :3] = dx
        deltas[k, :, 3:] = da
    return DeformationField(np.asarray(times, dtype=np.float64), deltas)


def smoothed_history(history, window: int = 100) -> np.ndarray:
    totals = np.array([h.total for h in history])
    if len(totals) < window:
        return totals
    kernel = np.ones(window) / window
    return np.convolve(totals, kernel, mode="valid")


@dataclass
class HeadFit:
    head: ToyMotionHead
    history: list  # LossReport per iteration
    train_tracks: np.ndarray  # track indices used for supervision
    test_tracks: np.ndarray
    heldout: Optional[TrackingMetrics] = None  # on the test tracks


def fit_head(bundle: SceneBundle, config: FitConfig | None = None, holdout: float = 0.25) -> HeadFit:
    """Regress track motion with the toy head alone (no rendering).

    Tracks are split at random; the head sees only the training split and is
    scored on the held-out one with the same anchoring and median
    normalisation as ``evalapps.evaluate_tracks``.  Depth maps stand in for
    fitted geometry.
    """
    cfg = config or FitConfig()
    w = cfg.weights
    tracks = bundle.tracks
    if tracks is None:
        raise ValueError("fit_head needs tracks")
    if not 0 <= holdout < 1:
        raise ValueError("holdout must lie in [0, 1)")
    rng = np.random.default_rng(cfg.seed)
    pixels, _, sources = init_from_depth(bundle, cfg.subsample)
    N, times = bundle.n_frames, bundle.timestamps
    P = tracks.n_points
    perm = rng.permutation(P)
    n_test = int(round(holdout * P))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    lookup = track_lookup(tracks, bundle, source_index(sources, N, bundle.resolution))[train]
    used = np.unique(lookup[lookup >= 0])
    local = np.full(len(sources), -1, dtype=np.int64)
    local[used] = np.arange(len(used))
    lookup = np.where(lookup >= 0, local[np.maximum(lookup, 0)], -1)
    train_set = TrackSet(tracks.points[train], tracks.visibility[train])

    feats = pixel_features(bundle, sources, cfg.n_freqs)
    head = ToyMotionHead.init(feats.shape[1], cfg.head_hidden, cfg.n_freqs, rng=rng, cond_std=cfg.head_cond_std)
    head.set_feature_stats(feats)
    mover = _HeadMotion(head, feats[used], times[sources[used, 0]])
    params = {k: v for k, v in head.params.items()}
    lr = {k: cfg.lr_head for k in params}
    state = AdamState()
    history = []
    for _ in range(cfg.iterations):
        q = int(rng.integers(N))
        dx, da = mover.forward(times[q])
        motion = _motion_terms(dx, lookup, train_set, q, w) if w.lambda_m > 0 and len(used) else None
        if motion is None:
            history.append(LossReport(total=0.0))
            continue
        history.append(combine({"motion_pt": motion[0], "motion_dist": motion[1]}, w))
        g = mover.backward(motion[2], np.zeros_like(da))
        adam_step(params, {k[len("head."):]: v for k, v in g.items()}, state, lr,
                  cfg.beta1, cfg.beta2, cfg.epsilon)

    heldout = None
    if n_test:
        field_ = bake_head(_HeadMotion(head, feats, times[sources[:, 0]]), times)
        sub = TrackSet(tracks.points[test], tracks.visibility[test])
        heldout, _ = fitted_track_metrics(pixels.position, field_, sources, bundle.cameras, sub,
                                          bundle.resolution)
    return HeadFit(head, history, train, test, heldout)
