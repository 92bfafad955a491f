"""End-to-end acceptance checks on generated scenes.

Each test records a ``criterion N PASS|FAIL`` line with the measured values
and its runtime; the lines are printed in the terminal summary.  The scene
fits are shared through module fixtures, so the whole file takes a while
(about half an hour on a laptop CPU).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from splat4d.cli import main
from splat4d.core import SplatterPixels, TrackSet
from splat4d.evalapps import (
    angular_error_deg, fitted_track_metrics, mask_iou, normalize_by_median, psnr, scene_flow,
    segment_moving, ssim, tracking_metrics,
)
from splat4d.fitting import FitConfig, fit_scene, smoothed_history
from splat4d.formats import (
    FittedModel, decode_pfm, decode_ppm, decode_tracks, encode_pfm, encode_ppm, encode_tracks, export_ply,
    load_model, read_masks, read_ply, read_scene, save_model, write_scene,
)
from splat4d.geometry import normalize_scene, unproject_depth
from splat4d.gradcheck import TOLERANCE, run as run_gradchecks
from splat4d.losses import LossWeights, combine, motion_distribution_loss, motion_point_loss
from splat4d.motion import evaluate_deformation, motion_map_from_field
from splat4d.rasterizer import rasterize, reference_rasterize
from splat4d.synth import dynamic_spec, generate, static_spec, varied_dynamic_spec
from splat4d.core import Camera

ABLATION_SEEDS = range(5)
ABLATION_ITERATIONS = 1000
ABLATION_RESOLUTION = (32, 32)


def record(log, n, ok, text, seconds):
    log[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}  [{seconds:.1f} s]"


def _heldout_psnr(res, scene, rec):
    out = []
    for cam, frame in zip(scene.heldout.cameras, scene.heldout.frames):
        cam = replace(cam, translation=cam.translation / rec.scale)
        d = evaluate_deformation(res.field, cam.timestamp)
        out.append(psnr(np.clip(rasterize(res.pixels, cam, deform_delta=d).rgb, 0, 1), frame))
    return np.array(out)


def _loss_ratio(res):
    h = smoothed_history(res.history)
    return h[-1] / h[0]


@pytest.fixture(scope="module")
def static_fit():
    scene = generate(static_spec(seed=0, n_heldout=4))
    bundle, rec = normalize_scene(scene.bundle)
    t = time.perf_counter()
    res = fit_scene(bundle, FitConfig(iterations=2000))
    return scene, bundle, rec, res, time.perf_counter() - t


@pytest.fixture(scope="module")
def dynamic_fit():
    # twice the default track count: the fit sees one half, scoring uses the other
    scene = generate(dynamic_spec(seed=0, n_heldout=4, n_tracks=512))
    bundle, rec = normalize_scene(scene.bundle)
    P = bundle.tracks.n_points
    split = np.random.default_rng(11).permutation(P)
    train, test = np.sort(split[: P // 2]), np.sort(split[P // 2:])
    tr = bundle.tracks
    fit_bundle = replace(bundle, tracks=TrackSet(tr.points[train], tr.visibility[train]))
    held = TrackSet(tr.points[test], tr.visibility[test])
    t = time.perf_counter()
    res = fit_scene(fit_bundle, FitConfig(iterations=2000))
    return scene, bundle, rec, res, held, time.perf_counter() - t


def _random_pixels(seed, n=50):
    rng = np.random.default_rng(seed)
    pos = np.c_[rng.uniform(-1, 1, (n, 2)), rng.uniform(1.5, 5, n)]
    return SplatterPixels(pos, rng.normal(size=(n, 4)), np.log(rng.uniform(0.03, 0.4, (n, 3))),
                          rng.normal(0, 2, n), rng.uniform(size=(n, 3)))


def test_criterion_01_rasterizer_oracle(acceptance_log):
    cam = Camera(np.eye(3), np.zeros(3), 32, 32, 16, 16, 32, 32)
    t = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        px = _random_pixels(100 + seed)
        a = rasterize(px, cam, (0.3, 0.5, 0.7))
        b = reference_rasterize(px, cam, (0.3, 0.5, 0.7))
        worst = max(worst, *(np.abs(getattr(a, k) - getattr(b, k)).max() for k in ("rgb", "depth", "alpha")))
    dt = time.perf_counter() - t
    ok = worst < 1e-5 and dt < 10
    record(acceptance_log, 1, ok, f"max |tiled - reference| = {worst:.2e} (< 1e-5)", dt)
    assert ok


def test_criterion_02_gradient_fidelity(acceptance_log, capsys):
    t = time.perf_counter()
    errors = run_gradchecks()
    code = main(["gradcheck"])
    dt = time.perf_counter() - t
    capsys.readouterr()
    worst = max(e for groups in errors.values() for e in groups.values())
    ok = worst < TOLERANCE and code == 0 and dt < 60
    record(acceptance_log, 2, ok, f"worst relative error {worst:.2e} (< 1e-2), gradcheck exit {code}", dt)
    assert ok


def test_criterion_03_loss_hand_values(acceptance_log):
    t = time.perf_counter()
    pred, gt = np.array([[1.0, 0, 0], [0, 0, 0]]), np.zeros((2, 3))
    pt = motion_point_loss(pred, gt)[0]
    dist = motion_distribution_loss(pred, gt)[0]
    rng = np.random.default_rng(0)
    gap = 0.0
    for _ in range(100):
        v = dict(zip(("depth", "render", "motion_pt", "motion_dist"), rng.uniform(0, 2, 4)))
        w = LossWeights(*rng.uniform(0, 3, 5))
        rep = combine(v, w)
        expect = w.lambda_d * v["depth"] + w.lambda_r * v["render"] + w.lambda_m * (
            w.lambda_pt * v["motion_pt"] + w.lambda_dist * v["motion_dist"])
        gap = max(gap, abs(rep.total - expect))
    ok = pt == 0.5 and dist == 0.25 and gap <= 1e-9
    record(acceptance_log, 3, ok, f"point {pt}, distribution {dist}, decomposition gap {gap:.1e}",
           time.perf_counter() - t)
    assert ok


def test_criterion_04_static_scene(acceptance_log, static_fit):
    scene, bundle, rec, res, dt = static_fit
    ps = _heldout_psnr(res, scene, rec)
    motion = float(np.linalg.norm(res.field.deltas[:, :, :3], axis=-1).mean())
    ratio = _loss_ratio(res)
    ok = ps.min() >= 28 and motion < 1e-2 and dt < 300 and ratio < 0.5
    record(acceptance_log, 4, ok,
           f"held-out PSNR {np.round(ps, 2).tolist()} (each >= 28), mean |dx| {motion:.2e} (< 1e-2), "
           f"loss ratio {ratio:.3f}", dt)
    assert ok


def test_criterion_05_dynamic_scene(acceptance_log, dynamic_fit):
    scene, bundle, rec, res, held, dt = dynamic_fit
    m, n = fitted_track_metrics(res.pixels.position, res.field, res.sources, bundle.cameras, held,
                                bundle.resolution)
    ps = _heldout_psnr(res, scene, rec)
    ratio = _loss_ratio(res)
    ok = m.epe3d < 0.05 and m.delta_010 > 0.9 and ps.min() >= 25 and dt < 600 and ratio < 0.5
    record(acceptance_log, 5, ok,
           f"EPE3D {m.epe3d:.4f} (< 0.05), delta0.10 {m.delta_010:.3f} (> 0.9) on {n} unseen tracks, "
           f"held-out PSNR {np.round(ps, 2).tolist()} (each >= 25), loss ratio {ratio:.3f}", dt)
    assert ok


def test_criterion_06_ablation_trend(acceptance_log):
    configs = {"no motion loss": dict(lambda_m=0.0), "distribution only": dict(lambda_pt=0.0),
               "point-wise only": dict(lambda_dist=0.0), "both": {}}
    t = time.perf_counter()
    epe = {k: [] for k in configs}
    for seed in ABLATION_SEEDS:
        bundle, _ = normalize_scene(generate(varied_dynamic_spec(seed, resolution=ABLATION_RESOLUTION)).bundle)
        for name, w in configs.items():
            res = fit_scene(bundle, FitConfig(iterations=ABLATION_ITERATIONS, seed=seed, weights=LossWeights(**w)))
            m, _ = fitted_track_metrics(res.pixels.position, res.field, res.sources, bundle.cameras,
                                        bundle.tracks, bundle.resolution)
            epe[name].append(m.epe3d)
    med = {k: float(np.median(v)) for k, v in epe.items()}
    ok = med["no motion loss"] > med["distribution only"] and med["point-wise only"] >= med["both"]
    text = ", ".join(f"{k} {v:.4f}" for k, v in med.items())
    record(acceptance_log, 6, ok, f"median EPE3D: {text}", time.perf_counter() - t)
    assert ok


def _motion_map(res, bundle):
    return motion_map_from_field(res.field, res.sources, bundle.n_frames, bundle.resolution, bundle.timestamps)


def test_criterion_07_segmentation(acceptance_log, dynamic_fit):
    scene, bundle, rec, res, _, _ = dynamic_fit
    t = time.perf_counter()
    mm = _motion_map(res, bundle)
    N = bundle.n_frames
    ious = []
    for i in range(N):
        q = N - 1 if i <= (N - 1) / 2 else 0  # the farthest keyframe
        ious.append(mask_iou(segment_moving(mm.displacements[q, i], 0.05), scene.masks[i]))
    ok = min(ious) >= 0.8
    record(acceptance_log, 7, ok, f"IoU per frame {np.round(ious, 3).tolist()} (each >= 0.8)",
           time.perf_counter() - t)
    assert ok


def test_criterion_08_scene_flow(acceptance_log, dynamic_fit):
    scene, bundle, rec, res, _, _ = dynamic_fit
    t = time.perf_counter()
    mm = _motion_map(res, bundle)
    N, (H, W) = bundle.n_frames, bundle.resolution
    i, q = 0, N - 1
    pos = np.zeros((N, H, W, 3))
    pos[res.sources[:, 0], res.sources[:, 1], res.sources[:, 2]] = res.pixels.position
    cams = bundle.cameras
    pred = scene_flow(mm.displacements[q, i], pos[i], cams[i], cams[q])
    gt_pts, _ = unproject_depth(bundle.depths[i], cams[i])
    gt = scene_flow(scene.pixel_motion(i, cams[q].timestamp) / rec.scale, gt_pts, cams[i], cams[q])
    sel = scene.masks[i] & pred.valid & gt.valid
    frac = float(np.mean(angular_error_deg(pred.flow[sel], gt.flow[sel]) < 5.0))
    still = scene_flow(np.zeros((H, W, 3)), pos[i], cams[i], cams[i])
    ok = frac >= 0.95 and not np.any(still.flow)
    record(acceptance_log, 8, ok,
           f"{100 * frac:.1f}% of {int(sel.sum())} moving pixels within 5 deg (>= 95%), "
           f"identity flow max {np.abs(still.flow).max():.1e}", time.perf_counter() - t)
    assert ok


def test_criterion_09_metric_closed_forms(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    p = psnr(np.full((8, 8, 3), 0.5), np.zeros((8, 8, 3)))
    img = rng.uniform(size=(32, 32, 3))
    s = ssim(img, img)
    monotone = idempotent = True
    for _ in range(200):
        gt = rng.normal(size=(20, 3, 3))
        pred = gt + rng.normal(0, rng.uniform(0.005, 0.3), gt.shape)
        m = tracking_metrics(pred, gt)
        monotone &= m.delta_005 <= m.delta_010
        once, _ = normalize_by_median(rng.normal(size=(int(rng.integers(1, 50)), 3)) * rng.uniform(0.1, 10))
        idempotent &= abs(normalize_by_median(once)[1] - 1.0) < 1e-9
    ok = abs(p - 6.0206) <= 1e-3 and abs(s - 1.0) < 1e-12 and monotone and idempotent
    record(acceptance_log, 9, ok,
           f"PSNR {p:.4f} dB, SSIM {s:.6f}, delta monotone {monotone}, median idempotent {idempotent}",
           time.perf_counter() - t)
    assert ok


def test_criterion_10_determinism_and_round_trips(acceptance_log, tmp_path):
    t = time.perf_counter()
    scene = generate(dynamic_spec(seed=4, resolution=(24, 24), n_frames=3, n_tracks=64))
    bundle, rec = normalize_scene(scene.bundle)
    cfg = FitConfig(iterations=40, seed=9)
    a, b = fit_scene(bundle, cfg), fit_scene(bundle, cfg)
    same_history = [h.total for h in a.history] == [h.total for h in b.history]

    checks = {}
    write_scene(scene.bundle, tmp_path / "scene", scene.masks)
    back = read_scene(tmp_path / "scene")
    checks["scene"] = (all(np.array_equal(x, y) for x, y in zip(back.frames, scene.bundle.frames))
                       and all(np.array_equal(x, y) for x, y in zip(back.depths, scene.bundle.depths))
                       and np.array_equal(back.tracks.points, scene.bundle.tracks.points)
                       and np.array_equal(read_masks(tmp_path / "scene"), scene.masks))
    u8 = np.random.default_rng(1).integers(0, 256, (5, 6, 3)).astype(np.uint8)
    checks["ppm"] = np.array_equal(decode_ppm(encode_ppm(u8)), u8)
    f32 = np.random.default_rng(2).normal(size=(5, 6)).astype(np.float32)
    checks["pfm"] = np.array_equal(decode_pfm(encode_pfm(f32)), f32)
    tr = decode_tracks(encode_tracks(scene.tracks))
    checks["tracks"] = np.array_equal(tr.points, scene.tracks.points) and np.array_equal(
        tr.visibility, scene.tracks.visibility)
    model = FittedModel(a.pixels, a.field, a.sources, rec.scale, tuple(bundle.cameras), bundle.resolution)
    save_model(model, tmp_path / "m.fit")
    m2 = load_model(tmp_path / "m.fit")
    save_model(m2, tmp_path / "m2.fit")
    checks["model"] = ((tmp_path / "m.fit").read_bytes() == (tmp_path / "m2.fit").read_bytes()
                       and np.array_equal(m2.pixels.position, a.pixels.position.astype(np.float32))
                       and np.array_equal(m2.field.deltas, a.field.deltas.astype(np.float32)))
    t1 = float(bundle.timestamps[1])
    export_ply(m2, t1, tmp_path / "m.ply")
    ply = read_ply(tmp_path / "m.ply")
    dx, _ = evaluate_deformation(m2.field, t1)
    moved = (m2.pixels.position + dx).astype(np.float32)
    checks["ply"] = len(ply["x"]) == m2.n_gaussians and np.array_equal(np.c_[ply["x"], ply["y"], ply["z"]], moved)
    ok = same_history and all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(acceptance_log, 10, ok,
           f"bit-identical histories {same_history}, round-trips {'all exact' if not failed else failed}",
           time.perf_counter() - t)
    assert ok
