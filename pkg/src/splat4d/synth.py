"""Procedural dynamic scenes with exact ground truth.

Frames come from analytic ray casting against spheres, boxes and finite
planes in front of a static background plane, so they are independent of the
Gaussian rasterizer.  Colour is supersampled; depth, object ids and masks use
the pixel-centre sample only.  All outputs are expressed in the coordinate
frame of the first camera.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import Camera, SceneBundle, TrackSet
from .geometry import NEAR_PLANE, axis_angle_matrix, look_at

BACKGROUND_ID = -1
NO_HIT = -2


@dataclass
class ObjectSpec:
    shape: str = "sphere"  # sphere | box | plane
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5,)  # sphere: (r,); box: half extents (3); plane: half extents (2)
    texture: str = "checker"  # checker | solid
    colors: tuple = ((0.85, 0.25, 0.2), (0.95, 0.8, 0.3))
    checker_size: float = 0.3
    orientation: tuple = (0.0, 0.0, 0.0)  # initial axis-angle
    velocity: tuple = (0.0, 0.0, 0.0)  # per unit time
    rotation_axis: tuple = (0.0, 1.0, 0.0)
    rotation_rate: float = 0.0  # radians per unit time
    pivot: Optional[tuple] = None  # rotation centre, defaults to ``center``

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0) or self.rotation_rate != 0)

    def pose(self, t: float):
        """Rotation and translation mapping local coordinates to world at t."""
        R0 = axis_angle_matrix(self.orientation, float(np.linalg.norm(self.orientation)))
        Rt = axis_angle_matrix(self.rotation_axis, self.rotation_rate * t)
        c0 = np.asarray(self.center, dtype=np.float64)
        pivot = c0 if self.pivot is None else np.asarray(self.pivot, dtype=np.float64)
        c = pivot + Rt @ (c0 - pivot) + np.asarray(self.velocity, dtype=np.float64) * t
        return Rt @ R0, c


@dataclass
class BackgroundSpec:
    point: tuple = (0.0, 0.0, 2.0)
    normal: tuple = (0.0, 0.0, -1.0)
    texture: str = "checker"
    colors: tuple = ((0.3, 0.45, 0.7), (0.75, 0.8, 0.85))
    checker_size: float = 0.7


@dataclass
class CameraPathSpec:
    kind: str = "orbit"  # orbit | linear
    target: tuple = (0.0, 0.0, 0.0)
    radius: float = 3.5
    height: float = 0.3
    start_deg: float = -12.0
    end_deg: float = 12.0
    start: tuple = (-0.5, 0.0, -4.0)  # linear path endpoints
    end: tuple = (0.5, 0.0, -4.0)
    fov_deg: float = 50.0


@dataclass
class SceneSpec:
    seed: int = 0
    n_frames: int = 5
    resolution: tuple = (48, 48)  # (H, W)
    objects: list = field(default_factory=lambda: [ObjectSpec()])
    camera: CameraPathSpec = field(default_factory=CameraPathSpec)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    light_dir: tuple = (0.35, 0.55, 0.75)  # direction the light travels
    ambient: float = 0.35
    n_tracks: int = 256
    object_track_fraction: float = 0.75
    supersample: int = 3
    n_heldout: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if isinstance(self.camera, dict):
            self.camera = CameraPathSpec(**self.camera)
        if isinstance(self.background, dict):
            self.background = BackgroundSpec(**self.background)
        self.resolution = tuple(int(r) for r in self.resolution)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class GeneratedScene:
    spec: SceneSpec
    bundle: SceneBundle
    tracks: TrackSet
    masks: np.ndarray  # (N, H, W) bool
    object_ids: np.ndarray  # (N, H, W) int
    local_points: np.ndarray  # (N, H, W, 3)
    heldout: Optional[SceneBundle] = None
    rebase: tuple = (np.eye(3), np.zeros(3))

    def pixel_motion(self, frame: int, t_q: float) -> np.ndarray:
        """World displacement (H, W, 3) of the surface point seen at each pixel
        centre of ``frame`` between its timestamp and ``t_q``."""
        t_i = self.bundle.cameras[frame].timestamp
        ids = self.object_ids[frame]
        local = self.local_points[frame]
        out = np.zeros(local.shape)
        R0, _ = self.rebase
        for k, obj in enumerate(self.spec.objects):
            sel = ids == k
            if not sel.any() or not obj.moving:
                continue
            Ri, ci = obj.pose(t_i)
            Rq, cq = obj.pose(t_q)
            pl = local[sel]
            out[sel] = (pl @ Rq.T + cq) - (pl @ Ri.T + ci)
        return out @ R0.T


def _checker(points, size, offset=0.1234):
    k = np.floor(points / size + offset).astype(np.int64)
    return (k.sum(axis=-1) % 2) == 0


def _albedo(texture, colors, size, local):
    c0 = np.asarray(colors[0], dtype=np.float64)
    if texture == "solid":
        return np.broadcast_to(c0, local.shape).copy()
    c1 = np.asarray(colors[1], dtype=np.float64)
    return np.where(_checker(local, size)[:, None], c0, c1)


def _intersect_object(obj: ObjectSpec, t: float, origin, dirs):
    """Ray parameter (z-depth for unit camera-z directions), local hit points
    and world normals; non-hits get ``inf``."""
    R, c = obj.pose(t)
    o = R.T @ (origin - c)
    d = dirs @ R  # R^T d
    n = len(d)
    s = np.full(n, np.inf)
    normal_l = np.zeros((n, 3))
    if obj.shape == "sphere":
        r = float(obj.size[0])
        a = np.sum(d * d, axis=1)
        b = 2.0 * d @ o
        cc = o @ o - r * r
        disc = b * b - 4 * a * cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s0 = (-b - sq) / (2 * a)
        s1 = (-b + sq) / (2 * a)
        cand = np.where(s0 > NEAR_PLANE, s0, np.where(s1 > NEAR_PLANE, s1, np.inf))
        s = np.where(ok, cand, np.inf)
        normal_l = (o + np.where(np.isfinite(s), s, 0.0)[:, None] * d) / r
    elif obj.shape == "box":
        h = np.asarray(obj.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        enter = tmin.max(axis=1)
        leave = tmax.min(axis=1)
        ok = (enter <= leave) & (leave > NEAR_PLANE)
        s = np.where(ok, np.where(enter > NEAR_PLANE, enter, leave), np.inf)
        axis = np.argmax(tmin, axis=1)
        hit = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        normal_l[np.arange(n), axis] = np.sign(hit[np.arange(n), axis])
    elif obj.shape == "plane":
        hx, hy = float(obj.size[0]), float(obj.size[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            sp = -o[2] / d[:, 2]
        hit = o + np.where(np.isfinite(sp), sp, 0.0)[:, None] * d
        ok = np.isfinite(sp) & (sp > NEAR_PLANE) & (np.abs(hit[:, 0]) <= hx) & (np.abs(hit[:, 1]) <= hy)
        s = np.where(ok, sp, np.inf)
        normal_l[:, 2] = 1.0
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    hit = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
    return s, hit, normal_l @ R.T


def _cast(spec: SceneSpec, t: float, origin, dirs):
    """Nearest hit per ray: depth, id (object index, background or none),
    local point (world for background) and world normal."""
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, NO_HIT, dtype=np.int64)
    local = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    bg = spec.background
    pn = np.asarray(bg.normal, dtype=np.float64)
    pn = pn / np.linalg.norm(pn)
    denom = dirs @ pn
    with np.errstate(divide="ignore", invalid="ignore"):
        sb = (np.asarray(bg.point) - origin) @ pn / denom
    sb = np.where(np.isfinite(sb) & (sb > NEAR_PLANE), sb, np.inf)
    take = sb < best
    best[take] = sb[take]
    ids[take] = BACKGROUND_ID
    local[take] = origin + sb[take, None] * dirs[take]
    normal[take] = pn
    for k, obj in enumerate(spec.objects):
        s, hit, nrm = _intersect_object(obj, t, origin, dirs)
        take = s < best
        best[take] = s[take]
        ids[take] = k
        local[take] = hit[take]
        normal[take] = nrm[take]
    return best, ids, local, normal


def _shade(spec: SceneSpec, ids, local, normal, dirs):
    n = len(ids)
    albedo = np.zeros((n, 3))
    bg = spec.background
    sel = ids == BACKGROUND_ID
    if sel.any():
        albedo[sel] = _albedo(bg.texture, bg.colors, bg.checker_size, local[sel])
    for k, obj in enumerate(spec.objects):
        sel = ids == k
        if sel.any():
            albedo[sel] = _albedo(obj.texture, obj.colors, obj.checker_size, local[sel])
    L = -np.asarray(spec.light_dir, dtype=np.float64)
    L /= np.linalg.norm(L)
    nrm = np.where((np.sum(normal * dirs, axis=1) > 0)[:, None], -normal, normal)
    lam = np.clip(nrm @ L, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lam
    out = albedo * shade[:, None]
    out[ids == NO_HIT] = 0.0
    return np.clip(out, 0.0, 1.0)


def _camera_poses(spec: SceneSpec, n: int, fractions):
    cp = spec.camera
    target = np.asarray(cp.target, dtype=np.float64)
    poses = []
    for f in fractions:
        if cp.kind == "orbit":
            ang = np.deg2rad(cp.start_deg + f * (cp.end_deg - cp.start_deg))
            eye = target + np.array([cp.radius * np.sin(ang), -cp.height, -cp.radius * np.cos(ang)])
        elif cp.kind == "linear":
            eye = (1 - f) * np.asarray(cp.start, dtype=np.float64) + f * np.asarray(cp.end, dtype=np.float64)
        else:
            raise ValueError(f"unknown camera path {cp.kind!r}")
        poses.append(look_at(eye, target))
    return poses


def _intrinsics(spec: SceneSpec):
    H, W = spec.resolution
    f = 0.5 * W / np.tan(0.5 * np.deg2rad(spec.camera.fov_deg))
    return f, f, 0.5 * W, 0.5 * H


def _render_view(spec: SceneSpec, R, tr, t):
    """Frame, depth, ids and local points for one generator-world camera."""
    H, W = spec.resolution
    fx, fy, cx, cy = _intrinsics(spec)
    center = -R.T @ tr
    ss = spec.supersample
    offs = (np.arange(ss) + 0.5) / ss
    color = np.zeros((H * W, 3))
    for oy in offs:
        for ox in offs:
            u, v = np.meshgrid(np.arange(W) + ox, np.arange(H) + oy)
            d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u, dtype=np.float64)], -1).reshape(-1, 3)
            dirs = d_cam @ R
            _, ids, local, normal = _cast(spec, t, center, dirs)
            color += _shade(spec, ids, local, normal, dirs)
    color /= ss * ss
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u, dtype=np.float64)], -1).reshape(-1, 3)
    dirs = d_cam @ R
    depth, ids, local, _ = _cast(spec, t, center, dirs)
    depth = np.where(np.isfinite(depth), depth, 0.0)
    frame = np.round(color.reshape(H, W, 3) * 255.0) / 255.0
    return (frame, depth.reshape(H, W).astype(np.float32).astype(np.float64),
            ids.reshape(H, W), local.reshape(H, W, 3))


def _world_point(spec: SceneSpec, obj_id: int, local: np.ndarray, t: float) -> np.ndarray:
    if obj_id == BACKGROUND_ID:
        return local
    R, c = spec.objects[obj_id].pose(t)
    return R @ local + c


def _track_visible(spec, R, tr, K, t, p):
    H, W = spec.resolution
    fx, fy, cx, cy = K
    pc = R @ p + tr
    if pc[2] <= NEAR_PLANE:
        return False
    u = fx * pc[0] / pc[2] + cx
    v = fy * pc[1] / pc[2] + cy
    if not (0.0 <= u < W and 0.0 <= v < H):
        return False
    d_cam = np.array([[(u - cx) / fx, (v - cy) / fy, 1.0]])
    depth, _, _, _ = _cast(spec, t, -R.T @ tr, d_cam @ R)
    return bool(depth[0] >= pc[2] * (1.0 - 1e-6) - 1e-9)


def _sample_tracks(spec: SceneSpec, rng, views, times, poses, K):
    N = spec.n_frames
    n_obj = int(round(spec.object_track_fraction * spec.n_tracks))
    wants = [(True, n_obj), (False, spec.n_tracks - n_obj)]
    anchors = []
    for on_object, count in wants:
        candidates = []
        for k in range(N):
            ids = views[k][2]
            sel = (ids >= 0) if on_object else (ids == BACKGROUND_ID)
            rr, cc = np.nonzero(sel)
            candidates.extend((k, r, c) for r, c in zip(rr, cc))
        if not candidates or count == 0:
            continue
        pick = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
        anchors.extend(candidates[i] for i in sorted(pick))
    P = len(anchors)
    points = np.zeros((P, N, 3))
    vis = np.zeros((P, N), dtype=bool)
    for p, (k, r, c) in enumerate(anchors):
        obj_id = int(views[k][2][r, c])
        local = views[k][3][r, c]
        for j in range(N):
            points[p, j] = _world_point(spec, obj_id, local, times[j])
            vis[p, j] = _track_visible(spec, *poses[j], K, times[j], points[p, j])
        vis[p, k] = True
    return points, vis


def generate(spec: SceneSpec) -> GeneratedScene:
    """Render frames, depths, tracks and moving-object masks for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    N = spec.n_frames
    H, W = spec.resolution
    times = np.linspace(0.0, 1.0, N)
    fracs = np.linspace(0.0, 1.0, N)
    poses = _camera_poses(spec, N, fracs)
    K = _intrinsics(spec)
    views = [_render_view(spec, R, tr, t) for (R, tr), t in zip(poses, times)]

    points, vis = _sample_tracks(spec, rng, views, times, poses, K)

    # express everything in the first camera's frame
    R0, t0 = poses[0]
    to_cam0 = lambda p: p @ R0.T + t0  # noqa: E731
    cams = []
    for (R, tr), t in zip(poses, times):
        Rn = R @ R0.T
        cams.append(Camera(Rn, tr - Rn @ t0, K[0], K[1], K[2], K[3], W, H, float(t)))
    track_pts = to_cam0(points.reshape(-1, 3)).reshape(points.shape).astype(np.float32).astype(np.float64)
    tracks = TrackSet(track_pts, vis)
    bundle = SceneBundle([v[0] for v in views], cams, [v[1] for v in views], tracks)

    moving_ids = [k for k, o in enumerate(spec.objects) if o.moving]
    object_ids = np.stack([v[2] for v in views])
    masks = np.isin(object_ids, moving_ids) if moving_ids else np.zeros_like(object_ids, dtype=bool)

    heldout = None
    if spec.n_heldout > 0:
        picks = np.unique(np.linspace(0, N - 2, spec.n_heldout).round().astype(int))
        hfr = [(j + 0.5) / (N - 1) for j in picks]
        hposes = _camera_poses(spec, len(picks), hfr)
        hframes, hdepths, hcams = [], [], []
        for (R, tr), j in zip(hposes, picks):
            f, d, _, _ = _render_view(spec, R, tr, times[j])
            Rn = R @ R0.T
            hcams.append(Camera(Rn, tr - Rn @ t0, K[0], K[1], K[2], K[3], W, H, float(times[j])))
            hframes.append(f)
            hdepths.append(d)
        heldout = SceneBundle(hframes, hcams, hdepths, None)

    return GeneratedScene(
        spec=spec, bundle=bundle, tracks=tracks, masks=masks, object_ids=object_ids,
        local_points=np.stack([v[3] for v in views]), heldout=heldout, rebase=(R0, t0),
    )


def gt_motion(tracks: TrackSet, i: int, q: int):
    """Displacements from frame i to frame q and their validity."""
    disp = tracks.points[:, q] - tracks.points[:, i]
    valid = tracks.visibility[:, i] & tracks.visibility[:, q]
    return disp, valid


def dynamic_spec(seed: int = 0, resolution=(48, 48), n_frames: int = 5, **kw) -> SceneSpec:
    """One translating sphere and one box revolving about an offset pivot."""
    objects = [
        ObjectSpec(shape="sphere", center=(-0.8, 0.1, 0.0), size=(0.7,),
                   colors=((0.9, 0.3, 0.2), (0.95, 0.75, 0.3)), checker_size=0.35,
                   velocity=(1.1, 0.0, 0.0)),
        ObjectSpec(shape="box", center=(0.85, -0.3, -0.2), size=(0.45, 0.4, 0.45),
                   colors=((0.25, 0.75, 0.35), (0.9, 0.9, 0.9)), checker_size=0.3,
                   orientation=(0.0, 0.4, 0.0), rotation_axis=(0.0, 1.0, 0.0),
                   rotation_rate=1.0, pivot=(0.8, -0.35, 0.6)),
    ]
    return SceneSpec(seed=seed, n_frames=n_frames, resolution=resolution, objects=objects, **kw)


def static_spec(seed: int = 0, resolution=(48, 48), n_frames: int = 5, **kw) -> SceneSpec:
    spec = dynamic_spec(seed, resolution, n_frames, **kw)
    for o in spec.objects:
        o.velocity = (0.0, 0.0, 0.0)
        o.rotation_rate = 0.0
    return spec


def varied_dynamic_spec(seed: int, resolution=(32, 32), n_frames: int = 5, **kw) -> SceneSpec:
    """``dynamic_spec`` with object placement, speed and spin drawn from
    ``seed``; seed sets for benchmarks come from here."""
    rng = np.random.default_rng([seed, 7])
    spec = dynamic_spec(seed, resolution, n_frames, **kw)
    sphere, box = spec.objects
    sphere.center = tuple(np.asarray(sphere.center) + rng.uniform(-0.15, 0.15, 3))
    speed = float(rng.uniform(0.8, 1.3))
    sphere.velocity = (speed, 0.0, float(rng.uniform(-0.2, 0.2)))
    box.center = tuple(np.asarray(box.center) + rng.uniform(-0.1, 0.1, 3))
    box.rotation_rate = float(rng.uniform(0.7, 1.3)) * (1.0 if rng.uniform() < 0.5 else -1.0)
    return spec
