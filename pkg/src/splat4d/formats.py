"""On-disk formats: scene directories, fitted models and PLY export.

Scene directory layout::

    manifest.json          version, resolution, per-frame records
    frame_000.ppm ...      8-bit binary PPM (P6)
    depth_000.pfm ...      little-endian greyscale PFM, scale -1.0
    tracks.txt             optional, text P x N x (x y z visible)
    masks.pgm              optional, N binary masks stacked vertically

Every write goes to a temporary file in the target directory and is renamed
into place, so an interrupted run never leaves a truncated file behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, SceneBundle, Splat4DError, SplatterPixels, TrackSet
from .motion import DELTA_DIM, DeformationField, deform, evaluate_deformation

SCENE_VERSION = "splat4d-scene/1"
MODEL_VERSION = "splat4d-fit/1"
TRACKS_VERSION = "splat4d-tracks/1"
SH_C0 = 0.28209479177387814


class ParseError(Splat4DError):
    def __init__(self, path, offset: int, message: str):
        self.path, self.offset = str(path), int(offset)
        super().__init__(f"{path}: byte {offset}: {message}")


class MissingFile(Splat4DError):
    pass


class ShapeMismatch(Splat4DError):
    pass


class IoError(Splat4DError):
    pass


# ---------------------------------------------------------------- atomic I/O

def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFile(f"missing file: {path}") from None


# ------------------------------------------------------- Netpbm-style headers

def _header_tokens(data: bytes, n: int, path):
    """First ``n`` whitespace-separated header tokens (``#`` comments
    skipped) and the offset just past the single whitespace that ends them."""
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, pos, "truncated header")
        tokens.append((data[start:pos].decode("ascii", "replace"), start))
    if pos >= len(data):
        raise ParseError(path, pos, "header not followed by data")
    return tokens, pos + 1


def _int_token(tok, path):
    text, off = tok
    try:
        v = int(text)
    except ValueError:
        raise ParseError(path, off, f"expected an integer, found {text!r}") from None
    if v <= 0:
        raise ParseError(path, off, f"expected a positive integer, found {v}")
    return v


def encode_ppm(img) -> bytes:
    """(H, W, 3) floats in [0, 1] or uint8 to binary PPM."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    H, W = arr.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + arr.tobytes()


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    """Binary PPM to (H, W, 3) uint8."""
    if data[:2] != b"P6":
        raise ParseError(path, 0, "not a binary PPM (magic P6)")
    toks, pos = _header_tokens(data, 4, path)
    W, H, maxval = (_int_token(t, path) for t in toks[1:])
    if maxval != 255:
        raise ParseError(path, toks[3][1], f"only 8-bit PPM supported, maxval {maxval}")
    need = H * W * 3
    if len(data) - pos < need:
        raise ParseError(path, len(data), f"pixel data truncated, need {need} bytes")
    return np.frombuffer(data, np.uint8, need, pos).reshape(H, W, 3).copy()


def encode_pgm(mask) -> bytes:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = np.asarray(arr, dtype=np.uint8)
    H, W = arr.shape
    return f"P5\n{W} {H}\n255\n".encode() + arr.tobytes()


def decode_pgm(data: bytes, path="<bytes>") -> np.ndarray:
    if data[:2] != b"P5":
        raise ParseError(path, 0, "not a binary PGM (magic P5)")
    toks, pos = _header_tokens(data, 4, path)
    W, H, maxval = (_int_token(t, path) for t in toks[1:])
    if maxval != 255:
        raise ParseError(path, toks[3][1], f"only 8-bit PGM supported, maxval {maxval}")
    if len(data) - pos < H * W:
        raise ParseError(path, len(data), "pixel data truncated")
    return np.frombuffer(data, np.uint8, H * W, pos).reshape(H, W).copy()


def encode_pfm(arr) -> bytes:
    """(H, W) float map to little-endian greyscale PFM (rows bottom-up)."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim != 2:
        raise ShapeMismatch(f"PFM needs an (H, W) map, got {a.shape}")
    H, W = a.shape
    return f"Pf\n{W} {H}\n-1.0\n".encode() + np.ascontiguousarray(a[::-1]).tobytes()


def decode_pfm(data: bytes, path="<bytes>") -> np.ndarray:
    if data[:2] != b"Pf":
        raise ParseError(path, 0, "not a greyscale PFM (magic Pf)")
    toks, pos = _header_tokens(data, 4, path)
    W, H = _int_token(toks[1], path), _int_token(toks[2], path)
    text, off = toks[3]
    try:
        scale = float(text)
    except ValueError:
        raise ParseError(path, off, f"bad scale field {text!r}") from None
    if scale >= 0:
        raise ParseError(path, off, "big-endian PFM (positive scale) is not supported; "
                                    "expected little-endian scale -1.0")
    need = H * W * 4
    if len(data) - pos < need:
        raise ParseError(path, len(data), f"float data truncated, need {need} bytes")
    a = np.frombuffer(data, "<f4", H * W, pos).reshape(H, W)[::-1]
    return a.astype(np.float64) * abs(scale)


def read_image(path) -> np.ndarray:
    """8-bit image as floats in [0, 1]; PPM natively, other formats via Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return decode_ppm(_read_bytes(path), path) / 255.0
    from PIL import Image

    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8) / 255.0


def write_image(path, img):
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        atomic_write(path, encode_ppm(img))
        return
    import io as _io

    from PIL import Image

    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr, "L" if arr.ndim == 2 else "RGB").save(buf, format=path.suffix.lstrip(".").upper() or "PNG")
    atomic_write(path, buf.getvalue())


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read_bytes(path), path)


def write_pfm(path, arr):
    atomic_write(path, encode_pfm(arr))


# ------------------------------------------------------------------- tracks

def encode_tracks(tracks: TrackSet) -> bytes:
    P, N = tracks.visibility.shape
    pts = np.asarray(tracks.points, dtype=np.float32)
    lines = [f"{TRACKS_VERSION} {P} {N}"]
    for p in range(P):
        for j in range(N):
            x, y, z = (repr(float(v)) for v in pts[p, j])
            lines.append(f"{x} {y} {z} {int(tracks.visibility[p, j])}")
    return ("\n".join(lines) + "\n").encode()


def decode_tracks(data: bytes, path="<bytes>") -> TrackSet:
    text = data.decode("ascii", "replace")
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] != TRACKS_VERSION:
        raise ParseError(path, 0, f"expected header '{TRACKS_VERSION} P N'")
    try:
        P, N = int(head[1]), int(head[2])
    except ValueError:
        raise ParseError(path, 0, "track counts are not integers") from None
    pts = np.zeros((P, N, 3), dtype=np.float32)
    vis = np.zeros((P, N), dtype=bool)
    offset = len(lines[0]) + 1
    for k in range(P * N):
        if k + 1 >= len(lines):
            raise ParseError(path, len(data), f"expected {P * N} track rows, found {k}")
        row = lines[k + 1]
        parts = row.split()
        try:
            if len(parts) != 4 or parts[3] not in ("0", "1"):
                raise ValueError
            pts[k // N, k % N] = [float(v) for v in parts[:3]]
        except ValueError:
            raise ParseError(path, offset, f"bad track row {row!r}") from None
        vis[k // N, k % N] = parts[3] == "1"
        offset += len(row) + 1
    return TrackSet(pts.astype(np.float64), vis)


# -------------------------------------------------------------------- scenes

def camera_to_dict(cam: Camera) -> dict:
    return {
        "rotation": [float(v) for v in np.asarray(cam.rotation).reshape(-1)],
        "translation": [float(v) for v in np.asarray(cam.translation).reshape(-1)],
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "timestamp": float(cam.timestamp),
    }


def camera_from_dict(d: dict, width: int, height: int) -> Camera:
    return Camera(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                  np.asarray(d["translation"], dtype=np.float64), float(d["fx"]), float(d["fy"]),
                  float(d["cx"]), float(d["cy"]), int(width), int(height), float(d["timestamp"]))


def write_scene(bundle: SceneBundle, path, masks=None):
    """Write a scene directory; ``masks`` is an optional (N, H, W) bool stack."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    H, W = bundle.resolution
    frames = []
    for i, (img, cam) in enumerate(zip(bundle.frames, bundle.cameras)):
        rec = {"image": f"frame_{i:03d}.ppm", "camera": camera_to_dict(cam)}
        write_image(root / rec["image"], img)
        if bundle.depths is not None:
            rec["depth"] = f"depth_{i:03d}.pfm"
            write_pfm(root / rec["depth"], bundle.depths[i])
        frames.append(rec)
    manifest = {"version": SCENE_VERSION, "n_frames": bundle.n_frames, "resolution": [H, W], "frames": frames}
    if bundle.tracks is not None:
        manifest["tracks"] = "tracks.txt"
        atomic_write(root / "tracks.txt", encode_tracks(bundle.tracks))
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != (bundle.n_frames, H, W):
            raise ShapeMismatch(f"masks must be {(bundle.n_frames, H, W)}, got {masks.shape}")
        manifest["masks"] = "masks.pgm"
        atomic_write(root / "masks.pgm", encode_pgm(masks.reshape(-1, W)))
    # manifest last: a scene is only readable once all its files exist
    atomic_write(root / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())


def _load_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    data = _read_bytes(path)
    try:
        man = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.pos, e.msg) from None
    if man.get("version") != SCENE_VERSION:
        raise ParseError(path, 0, f"unsupported scene version {man.get('version')!r}")
    for key in ("n_frames", "resolution", "frames"):
        if key not in man:
            raise ParseError(path, 0, f"manifest lacks {key!r}")
    if len(man["frames"]) != man["n_frames"]:
        raise ShapeMismatch(f"manifest declares {man['n_frames']} frames but lists {len(man['frames'])}")
    return man


def read_scene(path) -> SceneBundle:
    root = Path(path)
    man = _load_manifest(root)
    H, W = (int(v) for v in man["resolution"])
    frames, depths, cams = [], [], []
    for i, rec in enumerate(man["frames"]):
        img = read_image(root / rec["image"])
        if img.shape != (H, W, 3):
            raise ShapeMismatch(f"frame {i}: image is {img.shape[:2]}, manifest says {(H, W)}")
        frames.append(img)
        if "depth" in rec:
            d = read_pfm(root / rec["depth"])
            if d.shape != (H, W):
                raise ShapeMismatch(f"frame {i}: depth is {d.shape}, manifest says {(H, W)}")
            depths.append(d)
        cams.append(camera_from_dict(rec["camera"], W, H))
    if depths and len(depths) != len(frames):
        raise ShapeMismatch("depth maps must be given for every frame or none")
    tracks = None
    if man.get("tracks"):
        tp = root / man["tracks"]
        tracks = decode_tracks(_read_bytes(tp), tp)
        if tracks.visibility.shape[1] != man["n_frames"]:
            raise ShapeMismatch(f"tracks cover {tracks.visibility.shape[1]} frames, scene has {man['n_frames']}")
    return SceneBundle(frames, cams, depths or None, tracks)


def read_masks(path):
    """Moving-object masks (N, H, W) of a scene directory, or None."""
    root = Path(path)
    man = _load_manifest(root)
    if not man.get("masks"):
        return None
    H, W = (int(v) for v in man["resolution"])
    mp = root / man["masks"]
    stack = decode_pgm(_read_bytes(mp), mp)
    if stack.shape != (man["n_frames"] * H, W):
        raise ShapeMismatch(f"mask stack is {stack.shape}, expected {(man['n_frames'] * H, W)}")
    return stack.reshape(man["n_frames"], H, W) > 127


# -------------------------------------------------------------------- models

@dataclass
class FittedModel:
    pixels: SplatterPixels
    field: DeformationField
    sources: np.ndarray  # (G, 3) frame, row, col
    scale: float = 1.0  # normalisation divisor applied to the scene
    cameras: tuple = ()  # input cameras in model units
    resolution: tuple = (0, 0)

    @property
    def n_gaussians(self) -> int:
        return len(self.pixels)

    def positions_map(self) -> np.ndarray:
        """(N, H, W, 3) canonical position of each source pixel (0 if none)."""
        H, W = self.resolution
        out = np.zeros((len(self.cameras), H, W, 3))
        s = self.sources
        out[s[:, 0], s[:, 1], s[:, 2]] = self.pixels.position
        return out


_MODEL_ARRAYS = (
    ("positions", "<f4", 3), ("rotations", "<f4", 4), ("log_scales", "<f4", 3),
    ("opacity_logits", "<f4", 1), ("colors", "<f4", 3),
)


def save_model(model: FittedModel, path):
    """JSON header line, then little-endian arrays in header order.

    Float arrays are float32; the (G, 3) pixel sources are int32.
    """
    px, G = model.pixels, model.n_gaussians
    K = len(model.field.keyframe_times)
    blobs = [
        np.asarray(px.position, "<f4"), np.asarray(px.rotation, "<f4"), np.asarray(px.log_scale, "<f4"),
        np.asarray(px.opacity_logit, "<f4"), np.asarray(px.color, "<f4"),
        np.asarray(model.field.deltas, "<f4"), np.asarray(model.sources, "<i4"),
    ]
    header = {
        "version": MODEL_VERSION, "n_gaussians": G, "n_keyframes": K,
        "keyframe_times": [float(t) for t in model.field.keyframe_times],
        "normalization_scale": float(model.scale),
        "resolution": [int(v) for v in model.resolution],
        "cameras": [camera_to_dict(c) for c in model.cameras],
        "arrays": [[n, d, [G, c] if c > 1 else [G]] for n, d, c in _MODEL_ARRAYS]
        + [["deformation", "<f4", [K, G, DELTA_DIM]], ["sources", "<i4", [G, 3]]],
    }
    atomic_write(path, (json.dumps(header) + "\n").encode() + b"".join(b.tobytes() for b in blobs))


def load_model(path) -> FittedModel:
    data = _read_bytes(path)
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError(path, 0, "missing header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as e:
        raise ParseError(path, e.pos, e.msg) from None
    if header.get("version") != MODEL_VERSION:
        raise ParseError(path, 0, f"unsupported model version {header.get('version')!r}")
    pos = nl + 1
    arrays = {}
    for name, dtype, shape in header["arrays"]:
        n = int(np.prod(shape))
        size = n * np.dtype(dtype).itemsize
        if len(data) - pos < size:
            raise ParseError(path, len(data), f"array {name!r} truncated")
        arrays[name] = np.frombuffer(data, dtype, n, pos).reshape(shape).astype(
            np.float64 if dtype == "<f4" else np.int64)
        pos += size
    if pos != len(data):
        raise ParseError(path, pos, "trailing bytes after the last array")
    G = header["n_gaussians"]
    if arrays["positions"].shape[0] != G or arrays["deformation"].shape[:2] != (header["n_keyframes"], G):
        raise ShapeMismatch("array lengths disagree with the header")
    H, W = header["resolution"]
    pixels = SplatterPixels(arrays["positions"], arrays["rotations"], arrays["log_scales"],
                            arrays["opacity_logits"], arrays["colors"])
    return FittedModel(
        pixels, DeformationField(header["keyframe_times"], arrays["deformation"]), arrays["sources"],
        float(header["normalization_scale"]),
        tuple(camera_from_dict(c, W, H) for c in header["cameras"]), (H, W),
    )


# ----------------------------------------------------------------------- PLY

PLY_PROPERTIES = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                  "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2")


def export_ply(model: FittedModel, t_q: float, path):
    """Binary PLY of the model deformed to ``t_q``, in pre-activation form."""
    px = deform(model.pixels, evaluate_deformation(model.field, t_q))
    table = np.concatenate([
        px.position, px.opacity_logit[:, None], px.log_scale, px.rotation,
        (px.color - 0.5) / SH_C0,
    ], axis=1).astype("<f4")
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(table)}"]
    head += [f"property float {p}" for p in PLY_PROPERTIES]
    head.append("end_header")
    try:
        atomic_write(path, ("\n".join(head) + "\n").encode() + table.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_ply(path) -> dict:
    """Vertex properties of a binary little-endian float PLY."""
    data = _read_bytes(path)
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError(path, 0, "not a PLY file")
    lines = data[:end].decode("ascii").split("\n")
    if "format binary_little_endian 1.0" not in lines:
        raise ParseError(path, 4, "only binary little-endian PLY is supported")
    n = None
    names = []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:2] == ["property", "float"]:
            names.append(parts[2])
    props = np.frombuffer(data, "<f4", n * len(names), end + len(b"end_header\n")).reshape(n, len(names))
    return {name: props[:, k].astype(np.float64) for k, name in enumerate(names)}
