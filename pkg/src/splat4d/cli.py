"""Command-line entry point.

Exit codes: 0 success, 1 invalid arguments or inputs (checked before any
computation), 2 failure while computing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_cap():
    raw = os.environ.get("SPLAT4D_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPLAT4D_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("SPLAT4D_THREADS must be >= 0 (0 = auto)")
    if n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _need_file(path, flag):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")


def _need_scene(path, flag="--scene"):
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"{flag}: no manifest.json in {path}")


def _time(value, flag="--time"):
    if not (0.0 <= value <= 1.0):
        raise UsageError(f"{flag} must lie in [0, 1], got {value}")
    return value


def _read_json(path, flag):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{flag}: invalid JSON at line {e.lineno}: {e.msg}") from None


def _background(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError("--background must be three comma-separated numbers") from None
    if len(vals) != 3 or not all(0.0 <= v <= 1.0 for v in vals):
        raise UsageError("--background must be three values in [0, 1]")
    return tuple(vals)


def _write_report(path, values: dict):
    """Text ``key=value`` lines at ``path`` and JSON at ``path``.json."""
    from .formats import atomic_write

    lines = [f"{k}={v}" for k, v in values.items()]
    atomic_write(path, ("\n".join(lines) + "\n").encode())
    atomic_write(str(path) + ".json", (json.dumps(values, indent=1) + "\n").encode())
    print("\n".join(lines))


# ------------------------------------------------------------------ commands

def cmd_gen(a):
    _need_file(a.spec, "--spec")
    from .synth import SceneSpec

    try:
        spec = SceneSpec.from_dict(_read_json(a.spec, "--spec"))
    except (TypeError, ValueError) as e:
        raise UsageError(f"--spec: {e}") from None

    def run():
        from .formats import write_scene
        from .synth import generate

        g = generate(spec)
        write_scene(g.bundle, a.out, g.masks)
        if g.heldout is not None:
            write_scene(g.heldout, Path(a.out) / "heldout")
        print(f"wrote {g.bundle.n_frames} frames and {g.tracks.n_points} tracks to {a.out}")
    return run


def cmd_fit(a):
    _need_scene(a.scene)
    from .fitting import FitConfig

    cfg = FitConfig()
    if a.config:
        _need_file(a.config, "--config")
        try:
            cfg = FitConfig.from_dict(_read_json(a.config, "--config"))
        except (TypeError, ValueError) as e:
            raise UsageError(f"--config: {e}") from None

    def run():
        from .fitting import fit_scene
        from .formats import FittedModel, read_scene, save_model
        from .geometry import normalize_scene

        bundle, rec = normalize_scene(read_scene(a.scene))

        def to_model(res):
            return FittedModel(res.pixels, res.field, res.sources, rec.scale, tuple(bundle.cameras),
                               bundle.resolution)

        res = fit_scene(bundle, cfg, on_checkpoint=lambda it, r: save_model(to_model(r), a.out))
        save_model(to_model(res), a.out)
        last = res.history[-1]
        print(f"fitted {len(res.pixels)} splatter pixels over {cfg.iterations} iterations; "
              f"final loss {last.total:.6g}")
    return run


def _model_camera(model, spec):
    from .formats import camera_from_dict

    if spec.lstrip("-").isdigit():
        k = int(spec)
        if not 0 <= k < len(model.cameras):
            raise UsageError(f"--camera index must lie in [0, {len(model.cameras) - 1}]")
        return model.cameras[k]
    _need_file(spec, "--camera")
    d = _read_json(spec, "--camera")
    H, W = model.resolution
    try:
        cam = camera_from_dict(d, d.get("width", W), d.get("height", H))
    except (KeyError, ValueError) as e:
        raise UsageError(f"--camera: {e}") from None
    # camera files are in scene units; the model lives in normalised units
    return replace(cam, translation=cam.translation / model.scale)


def _load(path):
    from .formats import load_model

    _need_file(path, "--model")
    return load_model(path)


def cmd_render(a):
    model = _load(a.model)
    cam = _model_camera(model, a.camera)
    t = _time(a.time)
    bg = _background(a.background)

    def run():
        from .formats import write_image
        from .motion import evaluate_deformation
        from .rasterizer import rasterize

        out = rasterize(model.pixels, cam, bg, deform_delta=evaluate_deformation(model.field, t))
        write_image(a.out, np.clip(out.rgb, 0.0, 1.0))
        print(f"wrote {a.out}")
    return run


def cmd_eval(a):
    model = _load(a.model)
    _need_scene(a.scene)

    def run():
        from .core import TrackSet
        from .evalapps import fitted_track_metrics, psnr, ssim
        from .formats import read_scene
        from .motion import evaluate_deformation
        from .rasterizer import rasterize

        scene = read_scene(a.scene)
        s = model.scale
        report = {}
        if a.what == "nvs":
            ps, ss = [], []
            for k, (img, cam) in enumerate(zip(scene.frames, scene.cameras)):
                cam = replace(cam, translation=cam.translation / s)
                t = min(max(cam.timestamp, 0.0), 1.0)
                out = rasterize(model.pixels, cam, deform_delta=evaluate_deformation(model.field, t))
                pred = np.clip(out.rgb, 0.0, 1.0)
                ps.append(psnr(pred, img))
                ss.append(ssim(pred, img))
                report[f"psnr_{k}"] = round(ps[-1], 4)
                report[f"ssim_{k}"] = round(ss[-1], 6)
            report["psnr_mean"] = round(float(np.mean(ps)), 4)
            report["ssim_mean"] = round(float(np.mean(ss)), 6)
        else:
            if scene.tracks is None:
                raise UsageError("--scene has no tracks to evaluate")
            if scene.n_frames != len(model.cameras):
                raise UsageError("--scene frame count differs from the model's input frames")
            tracks = TrackSet(scene.tracks.points / s, scene.tracks.visibility)
            m, n_ok = fitted_track_metrics(model.pixels.position, model.field, model.sources, model.cameras,
                                           tracks, model.resolution)
            report.update({k: round(v, 6) for k, v in m.as_dict().items()})
            report["n_tracks"] = n_ok
        _write_report(a.report, report)
    return run


def _frame(model, i):
    if not 0 <= i < len(model.cameras):
        raise UsageError(f"--frame must lie in [0, {len(model.cameras) - 1}]")
    return i


def _query_camera(model, t):
    times = np.array([c.timestamp for c in model.cameras])
    return model.cameras[int(np.argmin(np.abs(times - t)))]


def cmd_flow(a):
    model = _load(a.model)
    i = _frame(model, a.frame)
    t = _time(a.time)

    def run():
        from .evalapps import scene_flow
        from .formats import write_pfm
        from .motion import evaluate_deformation

        H, W = model.resolution
        dx, _ = evaluate_deformation(model.field, t)
        sel = model.sources[:, 0] == i
        disp = np.zeros((H, W, 3))
        disp[model.sources[sel, 1], model.sources[sel, 2]] = dx[sel]
        has = np.zeros((H, W), dtype=bool)
        has[model.sources[sel, 1], model.sources[sel, 2]] = True
        fm = scene_flow(disp, model.positions_map()[i], model.cameras[i], _query_camera(model, t), valid=has)
        stem = str(a.out)[:-4] if str(a.out).endswith(".pfm") else str(a.out)
        write_pfm(stem + "_u.pfm", fm.flow[..., 0])
        write_pfm(stem + "_v.pfm", fm.flow[..., 1])
        print(f"wrote {stem}_u.pfm and {stem}_v.pfm ({int(fm.valid.sum())} valid pixels)")
    return run


def cmd_segment(a):
    if not a.threshold > 0:
        raise UsageError("--threshold: threshold must be positive")
    model = _load(a.model)
    i = _frame(model, a.frame)
    t = _time(a.time)

    def run():
        from .evalapps import segment_moving
        from .formats import write_image
        from .motion import evaluate_deformation

        H, W = model.resolution
        dx, _ = evaluate_deformation(model.field, t)
        sel = model.sources[:, 0] == i
        disp = np.zeros((H, W, 3))
        disp[model.sources[sel, 1], model.sources[sel, 2]] = dx[sel]
        mask = segment_moving(disp, a.threshold)
        write_image(a.out, mask.astype(np.float64))
        print(f"wrote {a.out} ({int(mask.sum())} moving pixels)")
    return run


def cmd_gradcheck(a):
    def run():
        from .gradcheck import TOLERANCE, run as run_checks

        worst = 0.0
        for module, groups in run_checks([a.module] if a.module else None).items():
            for group, err in groups.items():
                flag = "ok" if err < TOLERANCE else "FAIL"
                print(f"{module}.{group} max_rel_err={err:.3e} {flag}")
                worst = max(worst, err)
        if worst >= TOLERANCE:
            raise RuntimeError(f"gradient check failed: worst relative error {worst:.3e}")
    return run


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splat4d", description="Dynamic splatter-pixel fitting and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="generate a synthetic scene")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("fit", help="fit a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--camera", required=True, help="input camera index or camera JSON file")
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--background", default="0,0,0")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="evaluate novel views or tracks")
    s.add_argument("what", choices=["nvs", "track"])
    s.add_argument("--model", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flow", help="scene flow of an input frame toward a time")
    s.add_argument("--model", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--out", required=True, help="output prefix; writes <out>_u.pfm and <out>_v.pfm")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("segment", help="moving-object mask of an input frame")
    s.add_argument("--model", required=True)
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=["rasterizer", "losses", "head"])
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .core import Splat4DError

    try:
        args = build_parser().parse_args(argv)
        _apply_thread_cap()
        run = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Splat4DError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run()
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - the exit code is the contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
