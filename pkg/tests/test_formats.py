import json

import numpy as np
import pytest

from splat4d.core import Camera, SplatterPixels, TrackSet
from splat4d.fitting import init_from_depth
from splat4d.formats import (
    FittedModel, MissingFile, ParseError, ShapeMismatch, decode_pfm, decode_ppm, decode_tracks, encode_pfm,
    encode_ppm, encode_tracks, export_ply, load_model, read_image, read_masks, read_pfm, read_ply, read_scene,
    save_model, write_image, write_pfm, write_scene,
)
from splat4d.motion import DeformationField, deform, evaluate_deformation


def test_ppm_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(img)), img)
    with pytest.raises(ParseError) as err:
        decode_ppm(encode_ppm(img)[:-3])
    assert "truncated" in str(err.value)


def test_pfm_round_trip_and_layout():
    d = np.random.default_rng(1).uniform(0, 5, (4, 6)).astype(np.float32)
    data = encode_pfm(d)
    assert data.startswith(b"Pf\n6 4\n-1.0\n")
    np.testing.assert_array_equal(decode_pfm(data), d)
    # rows are stored bottom-up
    first = np.frombuffer(data[len(b"Pf\n6 4\n-1.0\n"):], "<f4", 6)
    np.testing.assert_array_equal(first, d[-1])


def test_big_endian_pfm_is_rejected():
    data = b"Pf\n2 1\n1.0\n" + np.array([1, 2], ">f4").tobytes()
    with pytest.raises(ParseError) as err:
        decode_pfm(data, "d.pfm")
    assert "big-endian" in str(err.value)
    assert err.value.offset == data.index(b"1.0")


def test_tracks_round_trip():
    rng = np.random.default_rng(2)
    tr = TrackSet(rng.normal(size=(5, 3, 3)).astype(np.float32).astype(np.float64), rng.uniform(size=(5, 3)) > 0.3)
    back = decode_tracks(encode_tracks(tr))
    np.testing.assert_array_equal(back.points, tr.points)
    np.testing.assert_array_equal(back.visibility, tr.visibility)
    with pytest.raises(ParseError):
        decode_tracks(b"splat4d-tracks/1 1 1\n0 0 zero 1\n")


def test_png_via_pillow(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (6, 5, 3)) / 255.0
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)


def test_scene_round_trip_is_exact(small_dynamic, tmp_path):
    b = small_dynamic.bundle
    write_scene(b, tmp_path / "s", small_dynamic.masks)
    back = read_scene(tmp_path / "s")
    for a, c in zip(b.frames, back.frames):
        assert np.array_equal(a, c)
    for a, c in zip(b.depths, back.depths):
        assert np.array_equal(a, c)
    np.testing.assert_array_equal(back.tracks.points, b.tracks.points)
    np.testing.assert_array_equal(back.tracks.visibility, b.tracks.visibility)
    for a, c in zip(b.cameras, back.cameras):
        np.testing.assert_array_equal(a.rotation, c.rotation)
        np.testing.assert_array_equal(a.translation, c.translation)
        assert (a.fx, a.cy, a.timestamp, a.width) == (c.fx, c.cy, c.timestamp, c.width)
    np.testing.assert_array_equal(read_masks(tmp_path / "s"), small_dynamic.masks)
    assert not list((tmp_path / "s").glob("*.tmp*"))


def test_frame_count_mismatch(small_dynamic, tmp_path):
    b = small_dynamic.bundle
    write_scene(b, tmp_path / "s")
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    man["frames"] = man["frames"][:2]
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ShapeMismatch):
        read_scene(tmp_path / "s")


def test_missing_image(small_dynamic, tmp_path):
    write_scene(small_dynamic.bundle, tmp_path / "s")
    (tmp_path / "s" / "frame_001.ppm").unlink()
    with pytest.raises(MissingFile):
        read_scene(tmp_path / "s")


def _model(small_dynamic, deltas=None):
    px, field, sources = init_from_depth(small_dynamic.bundle, 2)
    if deltas is not None:
        field = DeformationField(field.keyframe_times, deltas)
    return FittedModel(px, field, sources, 2.5, tuple(small_dynamic.bundle.cameras), (24, 24))


def test_model_round_trip_is_bit_exact(small_dynamic, tmp_path):
    rng = np.random.default_rng(4)
    m = _model(small_dynamic)
    d = rng.normal(size=m.field.deltas.shape).astype(np.float32).astype(np.float64)
    m = _model(small_dynamic, d)
    save_model(m, tmp_path / "m.fit")
    back = load_model(tmp_path / "m.fit")
    for name in ("position", "rotation", "log_scale", "opacity_logit", "color"):
        np.testing.assert_array_equal(getattr(back.pixels, name), getattr(m.pixels, name).astype(np.float32))
    np.testing.assert_array_equal(back.field.deltas, d)
    np.testing.assert_array_equal(back.sources, m.sources)
    assert back.scale == 2.5 and back.resolution == (24, 24)
    save_model(back, tmp_path / "again.fit")
    assert (tmp_path / "m.fit").read_bytes() == (tmp_path / "again.fit").read_bytes()


def test_truncated_model_is_rejected(small_dynamic, tmp_path):
    save_model(_model(small_dynamic), tmp_path / "m.fit")
    data = (tmp_path / "m.fit").read_bytes()
    (tmp_path / "t.fit").write_bytes(data[:-5])
    with pytest.raises(ParseError):
        load_model(tmp_path / "t.fit")


def test_ply_export(small_dynamic, tmp_path):
    rng = np.random.default_rng(5)
    m = _model(small_dynamic)
    m = _model(small_dynamic, 0.05 * rng.normal(size=m.field.deltas.shape))
    t = float(m.field.keyframe_times[1])
    export_ply(m, t, tmp_path / "a.ply")
    data = (tmp_path / "a.ply").read_bytes()
    head = data[:data.index(b"end_header")].decode()
    assert f"element vertex {m.n_gaussians}" in head
    names = [ln.split()[2] for ln in head.splitlines() if ln.startswith("property")]
    assert names == ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                     "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]
    props = read_ply(tmp_path / "a.ply")
    moved = deform(m.pixels, evaluate_deformation(m.field, t))
    np.testing.assert_array_equal(np.c_[props["x"], props["y"], props["z"]], moved.position.astype(np.float32))
    np.testing.assert_allclose(props["f_dc_0"] * 0.28209479177387814 + 0.5, m.pixels.color[:, 0], atol=1e-6)


def test_zero_deformation_export_matches_static(small_dynamic, tmp_path):
    m = _model(small_dynamic)
    export_ply(m, float(m.field.keyframe_times[0]), tmp_path / "a.ply")
    static = FittedModel(m.pixels, DeformationField.zeros([0.0], m.n_gaussians), m.sources)
    export_ply(static, 0.0, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
