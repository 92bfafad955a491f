"""A small per-pixel motion head conditioned on query time through AdaLN.

Two hidden dense layers; after each, the activations are layer-normalised
and modulated by a scale and shift that are affine in the sinusoidal
encoding of the query time.  The output layer starts at zero, so an untrained
head predicts no motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .motion import DEFAULT_FREQUENCIES, DELTA_DIM, encode_time

LN_EPS = 1e-5
LAYERS = (1, 2)


@dataclass
class ToyMotionHead:
    params: dict
    n_freqs: int = DEFAULT_FREQUENCIES
    feature_mean: np.ndarray = field(default=None)
    feature_std: np.ndarray = field(default=None)

    @classmethod
    def init(cls, in_dim: int, hidden: int = 64, n_freqs: int = DEFAULT_FREQUENCIES,
             rng: np.random.Generator | None = None, out_dim: int = DELTA_DIM,
             cond_std: float = 0.0) -> "ToyMotionHead":
        """``cond_std`` > 0 draws the AdaLN conditioning weights at random
        instead of zero, so the hidden state depends on time from the start."""
        rng = np.random.default_rng(0) if rng is None else rng
        E = 2 * n_freqs
        p = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
            "b2": np.zeros(hidden),
            "W3": np.zeros((hidden, out_dim)),
            "b3": np.zeros(out_dim),
        }
        for l in LAYERS:
            p[f"scale_W{l}"] = rng.normal(0.0, cond_std, (E, hidden)) if cond_std > 0 else np.zeros((E, hidden))
            p[f"scale_b{l}"] = np.ones(hidden)
            p[f"shift_W{l}"] = rng.normal(0.0, cond_std, (E, hidden)) if cond_std > 0 else np.zeros((E, hidden))
            p[f"shift_b{l}"] = np.zeros(hidden)
        return cls(p, n_freqs, np.zeros(in_dim), np.ones(in_dim))

    @property
    def in_dim(self) -> int:
        return self.params["W1"].shape[0]

    def set_feature_stats(self, features: np.ndarray):
        self.feature_mean = features.mean(axis=0)
        std = features.std(axis=0)
        self.feature_std = np.where(std > 1e-8, std, 1.0)

    def copy(self) -> "ToyMotionHead":
        return ToyMotionHead({k: v.copy() for k, v in self.params.items()}, self.n_freqs,
                             self.feature_mean.copy(), self.feature_std.copy())


def _time_rows(t_q, n_freqs: int) -> np.ndarray:
    # a scalar time stays a single row and broadcasts in the affine maps
    t = np.asarray(t_q, dtype=np.float64)
    return encode_time(t.reshape(-1), n_freqs)


@nb.njit(cache=True)
def _adaln_tanh(h, sc, sh):
    """Row-wise layer norm, modulation and tanh in one pass."""
    G, D = h.shape
    n = np.empty_like(h)
    out = np.empty_like(h)
    sig = np.empty((G, 1))
    per_row = sc.shape[0] > 1
    for i in range(G):
        r = i if per_row else 0
        mu = 0.0
        for k in range(D):
            mu += h[i, k]
        mu /= D
        var = 0.0
        for k in range(D):
            d = h[i, k] - mu
            var += d * d
        s = math.sqrt(var / D + LN_EPS)
        sig[i, 0] = s
        for k in range(D):
            v = (h[i, k] - mu) / s
            n[i, k] = v
            e = math.exp(-2.0 * abs(sc[r, k] * v + sh[r, k]))
            out[i, k] = math.copysign((1.0 - e) / (1.0 + e), sc[r, k] * v + sh[r, k])
    return n, sig, out


@nb.njit(cache=True)
def _adaln_tanh_backward(g_a, n, sig, sc, a_out):
    """Gradients on the pre-norm activations and on the per-row (or summed)
    scale and shift."""
    G, D = g_a.shape
    per_row = sc.shape[0] > 1
    g_h = np.empty_like(g_a)
    g_sc = np.zeros(sc.shape)
    g_sh = np.zeros(sc.shape)
    g_n = np.empty(D)
    for i in range(G):
        r = i if per_row else 0
        m1 = 0.0
        m2 = 0.0
        for k in range(D):
            gy = g_a[i, k] * (1.0 - a_out[i, k] * a_out[i, k])
            g_sc[r, k] += gy * n[i, k]
            g_sh[r, k] += gy
            gn = gy * sc[r, k]
            g_n[k] = gn
            m1 += gn
            m2 += gn * n[i, k]
        m1 /= D
        m2 /= D
        for k in range(D):
            g_h[i, k] = (g_n[k] - m1 - n[i, k] * m2) / sig[i, 0]
    return g_h, g_sc, g_sh


def toy_head_forward(head: ToyMotionHead, features: np.ndarray, t_q):
    """Predict (dx (G,3), da (G,7)) for each feature row at query time(s)
    ``t_q`` (a scalar or one time per row).  Also returns the cache needed
    by ``toy_head_backward``."""
    p = head.params
    x = (np.asarray(features, dtype=np.float64) - head.feature_mean) / head.feature_std
    enc = _time_rows(t_q, head.n_freqs)
    cache = {"x": x, "enc": enc}
    a = x
    for l in LAYERS:
        h = a @ p[f"W{l}"] + p[f"b{l}"]
        sc = enc @ p[f"scale_W{l}"] + p[f"scale_b{l}"]
        sh = enc @ p[f"shift_W{l}"] + p[f"shift_b{l}"]
        n, sig, a_next = _adaln_tanh(h, sc, sh)
        cache[l] = (a, n, sig, sc, a_next)
        a = a_next
    out = a @ p["W3"] + p["b3"]
    cache["a_last"] = a
    return out[:, :3], out[:, 3:], cache


def toy_head_backward(head: ToyMotionHead, cache: dict, g_dx: np.ndarray, g_da: np.ndarray | None = None) -> dict:
    """Parameter gradients given upstream gradients on (dx, da)."""
    p = head.params
    g_out = np.zeros((len(g_dx), p["W3"].shape[1]))
    g_out[:, :3] = g_dx
    if g_da is not None:
        g_out[:, 3:] = g_da
    grads = {"W3": cache["a_last"].T @ g_out, "b3": g_out.sum(axis=0)}
    g_a = g_out @ p["W3"].T
    enc = cache["enc"]
    for l in reversed(LAYERS):
        a_in, n, sig, sc, a_out = cache[l]
        g_h, g_sc, g_sh = _adaln_tanh_backward(np.ascontiguousarray(g_a), n, sig, sc, a_out)
        grads[f"scale_W{l}"] = enc.T @ g_sc
        grads[f"scale_b{l}"] = g_sc.sum(axis=0)
        grads[f"shift_W{l}"] = enc.T @ g_sh
        grads[f"shift_b{l}"] = g_sh.sum(axis=0)
        grads[f"W{l}"] = a_in.T @ g_h
        grads[f"b{l}"] = g_h.sum(axis=0)
        g_a = g_h @ p[f"W{l}"].T
    return grads
