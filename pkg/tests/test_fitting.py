import numpy as np
import pytest

import splat4d.fitting as fitting
from splat4d.core import Camera, NoValidPixels, NonFiniteGradient, SceneBundle, logit
from splat4d.evalapps import psnr
from splat4d.fitting import FitConfig, fit_head, fit_scene, init_from_depth, pixel_features, _HeadMotion
from splat4d.geometry import normalize_scene, unproject_depth
from splat4d.head import ToyMotionHead
from splat4d.losses import LossWeights
from splat4d.rasterizer import rasterize
from splat4d.synth import dynamic_spec, generate


def _flat_bundle(n=2, size=8, depth=2.0):
    rng = np.random.default_rng(0)
    cams = [Camera(np.eye(3), np.array([0.1 * i, 0, 0]), 8, 8, 4, 4, size, size, i / max(n - 1, 1))
            for i in range(n)]
    return SceneBundle([rng.uniform(size=(size, size, 3)) for _ in range(n)], cams,
                       [np.full((size, size), depth) for _ in range(n)])


@pytest.fixture(scope="module")
def small(small_dynamic):
    return normalize_scene(small_dynamic.bundle)[0]


def test_one_primitive_per_valid_pixel():
    b = _flat_bundle()
    px, field, sources = init_from_depth(b)
    assert len(px) == 128
    assert field.deltas.shape == (2, 128, 10) and not field.deltas.any()
    b.depths[1][3, 4] = -1.0
    px, _, sources = init_from_depth(b)
    assert len(px) == 127
    assert not np.any((sources[:, 0] == 1) & (sources[:, 1] == 3) & (sources[:, 2] == 4))


def test_initial_attributes():
    b = _flat_bundle()
    px, _, sources = init_from_depth(b)
    pts, _ = unproject_depth(b.depths[0], b.cameras[0])
    first = sources[:, 0] == 0
    np.testing.assert_array_equal(px.position[first], pts[sources[first, 1], sources[first, 2]])
    np.testing.assert_array_equal(px.color[first], b.frames[0][sources[first, 1], sources[first, 2]])
    np.testing.assert_array_equal(px.rotation, np.tile([1.0, 0, 0, 0], (128, 1)))
    np.testing.assert_allclose(px.opacity_logit, logit(0.1))
    # flat fronto-parallel depth: neighbours are depth / fx apart
    np.testing.assert_allclose(np.exp(px.log_scale), 0.5 * 2.0 / 8, rtol=1e-12)


def test_stride_subsamples():
    px, _, sources = init_from_depth(_flat_bundle(), stride=2)
    assert len(px) == 32
    assert np.all(sources[:, 1:] % 2 == 0)


def test_no_valid_depth():
    with pytest.raises(NoValidPixels):
        init_from_depth(_flat_bundle(depth=0.0))


def test_initial_render_resembles_frame():
    b = normalize_scene(generate(dynamic_spec(seed=0)).bundle)[0]
    px, _, _ = init_from_depth(b)
    out = rasterize(px, b.cameras[0])
    assert psnr(np.clip(out.rgb, 0, 1), b.frames[0]) > 12


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError, match="iterations"):
        FitConfig(iterations=0)
    with pytest.raises(ValueError, match="position"):
        FitConfig(lr_position=0.0)
    with pytest.raises(ValueError, match="beta"):
        FitConfig(beta1=1.0)
    with pytest.raises(ValueError, match="unknown config keys: nope"):
        FitConfig.from_dict({"nope": 1})
    cfg = FitConfig(iterations=7, weights=LossWeights(lambda_dist=0.5), motion_model="field")
    assert FitConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_motion_start(small):
    px, _, sources = init_from_depth(small)
    feats = pixel_features(small, sources)
    head = ToyMotionHead.init(feats.shape[1], rng=np.random.default_rng(0))
    head.set_feature_stats(feats)
    mover = _HeadMotion(head, feats, small.timestamps[sources[:, 0]])
    for j, cam in enumerate(small.cameras):
        dx, da = mover.forward(cam.timestamp)
        assert not dx.any() and not da.any()
        a = rasterize(px, cam, deform_delta=(dx, da)).rgb
        np.testing.assert_array_equal(a, rasterize(px, cam).rgb)


def test_deterministic_history(small):
    cfg = FitConfig(iterations=25, seed=4)
    a = fit_scene(small, cfg)
    b = fit_scene(small, cfg)
    assert [h.total for h in a.history] == [h.total for h in b.history]
    np.testing.assert_array_equal(a.pixels.position, b.pixels.position)
    np.testing.assert_array_equal(a.field.deltas, b.field.deltas)


@pytest.mark.parametrize("model", ["head", "field"])
def test_loss_decreases_and_own_frame_stays_put(small, model):
    res = fit_scene(small, FitConfig(iterations=200, seed=1, motion_model=model))
    totals = np.array([h.total for h in res.history])
    assert totals[-20:].mean() < 0.5 * totals[:20].mean()
    own = res.field.deltas[res.sources[:, 0], np.arange(len(res.sources))]
    assert not own.any()
    assert np.abs(res.field.deltas).max() > 0


def test_positions_stay_on_source_rays(small):
    res = fit_scene(small, FitConfig(iterations=30, seed=2))
    origins, rays = fitting._source_rays(small, res.sources)
    off = np.cross(res.pixels.position - origins, rays / np.linalg.norm(rays, axis=1, keepdims=True))
    assert np.abs(off).max() < 1e-12


def test_checkpoints(small):
    seen = []
    fit_scene(small, FitConfig(iterations=10, checkpoint_every=4), on_checkpoint=lambda it, r: seen.append(it))
    assert seen == [4, 8]


def test_aborts_after_ten_non_finite_steps(small, monkeypatch):
    calls = []
    real = fitting.rasterize_backward

    def poisoned(*args, **kw):
        calls.append(1)
        g = real(*args, **kw)
        g["color"] = g["color"] * np.nan
        return g

    monkeypatch.setattr(fitting, "rasterize_backward", poisoned)
    with pytest.raises(NonFiniteGradient) as err:
        fit_scene(small, FitConfig(iterations=50))
    assert err.value.group == "color"
    assert len(calls) == fitting.MAX_NONFINITE


def test_head_without_motion_loss_stays_zero(small):
    res = fit_head(small, FitConfig(iterations=20, weights=LossWeights(lambda_pt=0.0, lambda_dist=0.0)))
    assert not res.head.params["W3"].any() and not res.head.params["b3"].any()


def test_head_learns_track_motion(small):
    res = fit_head(small, FitConfig(iterations=300, seed=0, weights=LossWeights(lambda_dist=0.0)))
    assert len(res.test_tracks) == 16 and len(set(res.test_tracks) & set(res.train_tracks)) == 0
    still = fit_head(small, FitConfig(iterations=1, weights=LossWeights(lambda_m=0.0)))
    assert res.heldout.epe3d < still.heldout.epe3d
    totals = [h.total for h in res.history]
    assert np.mean(totals[-20:]) < np.mean(totals[:20])


def test_head_combined_motion_loss_not_worse_than_point_only():
    from splat4d.synth import varied_dynamic_spec

    epe = {"point": [], "both": []}
    for seed in range(5):
        b, _ = normalize_scene(generate(varied_dynamic_spec(seed, resolution=(32, 32), n_tracks=512)).bundle)
        for name, w in (("point", LossWeights(lambda_dist=0.0)), ("both", LossWeights())):
            epe[name].append(fit_head(b, FitConfig(iterations=1000, seed=seed, weights=w)).heldout.epe3d)
    assert max(epe["point"] + epe["both"]) < 0.1
    assert np.median(epe["both"]) <= np.median(epe["point"])
