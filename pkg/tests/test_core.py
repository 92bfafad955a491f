import numpy as np
import pytest

from splat4d.core import (
    Camera, SceneBundle, SplatterPixels, activate, logit, normalize_quaternion, sigmoid, validate_scene,
)
from conftest import pinhole


def _bundle(times=(0.0, 1.0), rotation=None):
    frames = [np.full((4, 5, 3), 0.5) for _ in times]
    cams = [Camera(np.eye(3) if rotation is None else rotation, np.zeros(3), 10, 10, 2.5, 2, 5, 4, t)
            for t in times]
    return SceneBundle(frames, cams, [np.ones((4, 5)) for _ in times])


def test_well_formed_bundle_has_no_violations():
    assert validate_scene(_bundle()) == []


def test_repeated_timestamp_is_reported():
    assert validate_scene(_bundle((0.5, 0.5))) == ["timestamps not strictly increasing at index 1"]


def test_improper_rotation_is_reported():
    problems = validate_scene(_bundle((0.0,), rotation=np.diag([1.0, 1.0, -1.0])))
    assert problems == ["camera 0: improper rotation"]


def test_violations_name_field_and_index():
    b = _bundle((0.0, 0.4, 1.2))
    b.frames[1] = np.zeros((3, 5, 3))
    problems = validate_scene(b)
    assert any(p.startswith("frame 1") for p in problems)
    assert any(p.startswith("camera 2") and "timestamp" in p for p in problems)


def test_activation_examples():
    px = SplatterPixels([[0, 0, 1]], [[2, 0, 0, 0]], [[0, 0, 0]], [0.0], [[0.2, 1.4, -0.1]])
    a = activate(px)
    assert a.opacity[0] == 0.5
    np.testing.assert_array_equal(a.scale, [[1, 1, 1]])
    np.testing.assert_array_equal(a.rotation, [[1, 0, 0, 0]])
    np.testing.assert_array_equal(a.color, [[0.2, 1.0, 0.0]])


def test_activation_ranges_and_idempotence():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(100, 4))
    u = normalize_quaternion(q)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(normalize_quaternion(u), u, atol=1e-7)
    s = sigmoid(rng.normal(0, 30, 1000))
    assert np.all((s >= 0) & (s <= 1))
    x = rng.normal(0, 3, 50)
    np.testing.assert_allclose(logit(sigmoid(x)), x, atol=1e-9)


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise"):
        out = sigmoid(np.array([-800.0, 800.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_mismatched_rows_rejected():
    with pytest.raises(ValueError, match="rotation"):
        SplatterPixels(np.zeros((2, 3)), np.zeros((1, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3)))


def test_camera_center():
    cam = pinhole(translation=np.array([0.0, 0.0, -5.0]))
    np.testing.assert_array_equal(cam.center, [0, 0, 5])


def test_generated_bundle_is_valid(small_dynamic, small_static):
    assert validate_scene(small_dynamic.bundle) == []
    assert validate_scene(small_static.bundle) == []
