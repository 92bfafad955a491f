"""Central finite-difference checks of every analytic gradient.

Each suite returns ``{group: relative error}`` where the error is
``|g_fd - g| / |g_fd|`` over the whole parameter group.
"""

from __future__ import annotations

import numpy as np

from .core import Camera, SplatterPixels
from .head import ToyMotionHead, toy_head_backward, toy_head_forward
from .losses import LossWeights, depth_loss, motion_distribution_loss, motion_point_loss, render_loss, total_loss
from .rasterizer import rasterize, rasterize_backward

EPS = 1e-3
TOLERANCE = 1e-2


def _fd(f, x, eps=EPS):
    """Central differences of scalar ``f`` with respect to array ``x``
    (perturbed in place and restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _rel(fd, an) -> float:
    den = np.linalg.norm(fd)
    return float(np.linalg.norm(fd - an) / den) if den > 0 else float(np.linalg.norm(an))


def random_scene(rng, n=10, size=16):
    pos = np.c_[rng.uniform(-1, 1, (n, 2)), rng.uniform(2, 5, n)]
    pixels = SplatterPixels(pos, rng.normal(size=(n, 4)), np.log(rng.uniform(0.05, 0.3, (n, 3))),
                            rng.normal(0, 1.5, n), rng.uniform(0, 1, (n, 3)))
    cam = Camera(np.eye(3), np.zeros(3), size * 0.95, size * 0.95, size / 2, size / 2, size, size, 0.0)
    return pixels, cam


def check_rasterizer(seed: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    px, cam = random_scene(rng)
    H, W = cam.height, cam.width
    gr, gd, ga = rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)), rng.normal(size=(H, W))
    dx, da = rng.normal(0, 0.05, (len(px), 3)), rng.normal(0, 0.05, (len(px), 7))
    bg = (0.1, 0.2, 0.3)

    def loss():
        o = rasterize(px, cam, bg, (dx, da))
        return (o.rgb * gr).sum() + (o.depth * gd).sum() + (o.alpha * ga).sum()

    g = rasterize_backward(rasterize(px, cam, bg, (dx, da)), gr, gd, ga)
    out = {name: _rel(_fd(loss, getattr(px, name)), g[name])
           for name in ("position", "rotation", "log_scale", "opacity_logit", "color")}
    out["delta_position"] = _rel(_fd(loss, dx), g["delta_position"])
    fd_da = _fd(loss, da)
    out["delta_log_scale"] = _rel(fd_da[:, :3], g["delta_log_scale"])
    out["delta_rotation"] = _rel(fd_da[:, 3:], g["delta_rotation"])
    return out


def _away_from_kinks(rng, shape, margin=1e-2):
    gt = rng.normal(size=shape)
    pred = gt + rng.normal(size=shape)
    small = np.abs(pred - gt) < margin
    pred[small] += np.sign(pred - gt)[small] * margin + margin
    return pred, gt


def check_losses(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    pred, gt = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
    valid = rng.uniform(size=(6, 7)) > 0.2
    _, g = depth_loss(pred, gt, valid)
    out["depth"] = _rel(_fd(lambda: depth_loss(pred, gt, valid)[0], pred), g)

    img, ref = rng.uniform(size=(5, 4, 3)), rng.uniform(size=(5, 4, 3))
    _, g = render_loss(img, ref)
    out["render"] = _rel(_fd(lambda: render_loss(img, ref)[0], img), g)

    mp, mg = _away_from_kinks(rng, (12, 3))
    mvalid = np.ones(12, dtype=bool)
    mvalid[3] = False
    _, g = motion_point_loss(mp, mg, mvalid)
    out["motion_pt"] = _rel(_fd(lambda: motion_point_loss(mp, mg, mvalid)[0], mp), g)

    # Gram entries stay clear of zero for this draw, so |.| is smooth nearby
    dp, dg = rng.normal(size=(8, 3)), 2.0 * rng.normal(size=(8, 3))
    _, g = motion_distribution_loss(dp, dg, None)
    out["motion_dist"] = _rel(_fd(lambda: motion_distribution_loss(dp, dg, None)[0], dp), g)

    w = LossWeights(0.7, 1.3, 0.9, 1.1, 0.4)

    def tot():
        return total_loss(w, render=(img, ref), depth=(pred, gt, valid), motion=(dp, dg, None))[0].total

    _, grads = total_loss(w, render=(img, ref), depth=(pred, gt, valid), motion=(dp, dg, None))
    out["total.render"] = _rel(_fd(tot, img), grads["render"])
    out["total.depth"] = _rel(_fd(tot, pred), grads["depth"])
    out["total.motion"] = _rel(_fd(tot, dp), grads["motion"])
    return out


def check_head(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    head = ToyMotionHead.init(10, hidden=16, n_freqs=4, rng=rng, cond_std=0.5)
    # a trained-looking head: non-zero output layer and conditioning
    head.params["W3"] = rng.normal(0, 0.3, head.params["W3"].shape)
    head.params["b3"] = rng.normal(0, 0.1, head.params["b3"].shape)
    feats = rng.normal(size=(7, 10))
    head.set_feature_stats(feats)
    t_q = rng.uniform(0, 1, 7)
    gx, ga = rng.normal(size=(7, 3)), rng.normal(size=(7, 7))

    def loss():
        dx, da, _ = toy_head_forward(head, feats, t_q)
        return (dx * gx).sum() + (da * ga).sum()

    _, _, cache = toy_head_forward(head, feats, t_q)
    g = toy_head_backward(head, cache, gx, ga)
    return {k: _rel(_fd(loss, head.params[k]), g[k]) for k in head.params}


SUITES = {"rasterizer": check_rasterizer, "losses": check_losses, "head": check_head}


def run(modules=None) -> dict:
    """``{module: {group: error}}`` for the requested suites (default all)."""
    names = list(SUITES) if not modules else list(modules)
    return {name: SUITES[name]() for name in names}
