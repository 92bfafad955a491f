"""Numba kernels for tile binning, compositing and its adjoint.

Every kernel parallelises over 16x16 tiles.  Each tile writes only its own
pixels (forward) or its own slice of the intersection buffer (backward), and
the per-Gaussian reduction runs sequentially afterwards, so results do not
depend on the thread count.
"""

from __future__ import annotations

import math
import os

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "workqueue"

from .projection import KERNEL_FLOOR

TILE = 16
T_MIN = 1e-4

_KSCALE = 1.0 / (1.0 - KERNEL_FLOOR)


@nb.njit(cache=True)
def bin_gaussians(order, means, radii, width, height, tile):
    """Per-tile Gaussian lists, each in the depth order given by ``order``.

    Returns CSR-style ``offsets`` (n_tiles + 1) and ``ids`` (n_isect).
    """
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    counts = np.zeros(tx_n * ty_n + 1, dtype=np.int64)
    rect = np.empty((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        r = radii[g]
        u0 = max(int(math.ceil(means[g, 0] - r - 0.5)), 0)
        u1 = min(int(math.floor(means[g, 0] + r - 0.5)), width - 1)
        v0 = max(int(math.ceil(means[g, 1] - r - 0.5)), 0)
        v1 = min(int(math.floor(means[g, 1] + r - 0.5)), height - 1)
        if u0 > u1 or v0 > v1:
            rect[k, 0] = 1
            rect[k, 1] = 0
            rect[k, 2] = 1
            rect[k, 3] = 0
            continue
        rect[k, 0] = u0 // tile
        rect[k, 1] = u1 // tile
        rect[k, 2] = v0 // tile
        rect[k, 3] = v1 // tile
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                counts[ty * tx_n + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                t = ty * tx_n + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@nb.njit(inline="always")
def _pixel_range(mean, r, size):
    # pixels whose centre lies within the radius along one axis
    lo = max(int(math.ceil(mean - r - 0.5)), 0)
    hi = min(int(math.floor(mean + r - 0.5)), size - 1)
    return lo, hi


@nb.njit(inline="always")
def _gather(start, n, ids, means, conic, opac, color, depth, radii, width, height):
    """Copy one tile's Gaussians into contiguous local arrays."""
    loc = np.empty((n, 10))
    rng = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        g = ids[start + k]
        loc[k, 0] = means[g, 0]
        loc[k, 1] = means[g, 1]
        loc[k, 2] = conic[g, 0]
        loc[k, 3] = conic[g, 1]
        loc[k, 4] = conic[g, 2]
        loc[k, 5] = opac[g]
        loc[k, 6] = color[g, 0]
        loc[k, 7] = color[g, 1]
        loc[k, 8] = color[g, 2]
        loc[k, 9] = depth[g]
        u0, u1 = _pixel_range(means[g, 0], radii[g], width)
        v0, v1 = _pixel_range(means[g, 1], radii[g], height)
        rng[k, 0] = u0
        rng[k, 1] = u1
        rng[k, 2] = v0
        rng[k, 3] = v1
    return loc, rng


@nb.njit(inline="always")
def _row_entries(rng, n, py, out):
    cnt = 0
    for k in range(n):
        if rng[k, 2] <= py and py <= rng[k, 3]:
            out[cnt] = k
            cnt += 1
    return cnt


@nb.njit(inline="always")
def _kernel(loc, k, dx, dy):
    m = loc[k, 2] * dx * dx + 2.0 * loc[k, 3] * dx * dy + loc[k, 4] * dy * dy
    if m >= 9.0 or m < 0.0:
        return 0.0, m
    return (math.exp(-0.5 * m) - KERNEL_FLOOR) * _KSCALE, m


@nb.njit(parallel=True, cache=True)
def composite_forward(offsets, ids, means, conic, opac, color, depth, radii, bg, width, height, tile):
    """Front-to-back compositing; ``n_used`` is the length of the tile-list
    prefix each pixel consumed before its transmittance fell below T_MIN."""
    tx_n = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    rgb = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    alpha = np.zeros((height, width))
    n_used = np.zeros((height, width), dtype=np.int64)
    for t in nb.prange(n_tiles):
        ty = t // tx_n
        tx = t % tx_n
        start = offsets[t]
        n = offsets[t + 1] - start
        loc, rng = _gather(start, n, ids, means, conic, opac, color, depth, radii, width, height)
        row = np.empty(n, dtype=np.int64)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            cnt = _row_entries(rng, n, py, row)
            fy = py + 0.5
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                T = 1.0
                r = 0.0
                gr = 0.0
                b = 0.0
                d = 0.0
                used = n
                for kk in range(cnt):
                    k = row[kk]
                    if px < rng[k, 0] or px > rng[k, 1]:
                        continue
                    G, m = _kernel(loc, k, fx - loc[k, 0], fy - loc[k, 1])
                    a = loc[k, 5] * G
                    if a <= 0.0:
                        continue
                    w = a * T
                    r += w * loc[k, 6]
                    gr += w * loc[k, 7]
                    b += w * loc[k, 8]
                    d += w * loc[k, 9]
                    T *= 1.0 - a
                    if T < T_MIN:
                        used = k + 1
                        break
                rgb[py, px, 0] = r + T * bg[0]
                rgb[py, px, 1] = gr + T * bg[1]
                rgb[py, px, 2] = b + T * bg[2]
                dep[py, px] = d
                alpha[py, px] = 1.0 - T
                n_used[py, px] = used
    return rgb, dep, alpha, n_used


@nb.njit(parallel=True, cache=True)
def composite_backward(offsets, ids, means, conic, opac, color, depth, radii, bg, width, height, tile,
                       n_used, g_rgb, g_dep, g_alpha):
    """Adjoint of ``composite_forward``.

    Returns an (n_isect, 10) buffer of per-intersection gradients with columns
    mean(2), conic(3), opacity(1), color(3), depth(1).
    """
    tx_n = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    buf = np.zeros((ids.shape[0], 10))
    for t in nb.prange(n_tiles):
        ty = t // tx_n
        tx = t % tx_n
        start = offsets[t]
        n = offsets[t + 1] - start
        loc, rng = _gather(start, n, ids, means, conic, opac, color, depth, radii, width, height)
        row = np.empty(n, dtype=np.int64)
        hit = np.empty(n, dtype=np.int64)
        a_loc = np.empty(n)
        T_loc = np.empty(n)
        G_loc = np.empty(n)
        m_loc = np.empty(n)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            cnt = _row_entries(rng, n, py, row)
            fy = py + 0.5
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                used = n_used[py, px]
                # replay the forward pass over contributing entries
                T = 1.0
                nh = 0
                for kk in range(cnt):
                    k = row[kk]
                    if k >= used:
                        break
                    if px < rng[k, 0] or px > rng[k, 1]:
                        continue
                    G, m = _kernel(loc, k, fx - loc[k, 0], fy - loc[k, 1])
                    a = loc[k, 5] * G
                    if a <= 0.0:
                        continue
                    hit[nh] = k
                    a_loc[nh] = a
                    T_loc[nh] = T
                    G_loc[nh] = G
                    m_loc[nh] = m
                    nh += 1
                    T *= 1.0 - a
                gr0 = g_rgb[py, px, 0]
                gr1 = g_rgb[py, px, 1]
                gr2 = g_rgb[py, px, 2]
                gd = g_dep[py, px]
                ga = g_alpha[py, px]
                # colour/depth/alpha composited behind entry j, starting at T=1
                B0 = bg[0]
                B1 = bg[1]
                B2 = bg[2]
                Bd = 0.0
                Ba = 0.0
                for j in range(nh - 1, -1, -1):
                    k = hit[j]
                    a = a_loc[j]
                    Tj = T_loc[j]
                    w = a * Tj
                    c0 = loc[k, 6]
                    c1 = loc[k, 7]
                    c2 = loc[k, 8]
                    z = loc[k, 9]
                    e = start + k
                    buf[e, 6] += gr0 * w
                    buf[e, 7] += gr1 * w
                    buf[e, 8] += gr2 * w
                    buf[e, 9] += gd * w
                    g_a = Tj * (gr0 * (c0 - B0) + gr1 * (c1 - B1) + gr2 * (c2 - B2)
                                + gd * (z - Bd) + ga * (1.0 - Ba))
                    B0 = a * c0 + (1.0 - a) * B0
                    B1 = a * c1 + (1.0 - a) * B1
                    B2 = a * c2 + (1.0 - a) * B2
                    Bd = a * z + (1.0 - a) * Bd
                    Ba = a + (1.0 - a) * Ba
                    buf[e, 5] += g_a * G_loc[j]
                    g_m = g_a * loc[k, 5] * (-0.5 * math.exp(-0.5 * m_loc[j]) * _KSCALE)
                    dx = fx - loc[k, 0]
                    dy = fy - loc[k, 1]
                    buf[e, 0] += -2.0 * g_m * (loc[k, 2] * dx + loc[k, 3] * dy)
                    buf[e, 1] += -2.0 * g_m * (loc[k, 3] * dx + loc[k, 4] * dy)
                    buf[e, 2] += g_m * dx * dx
                    buf[e, 3] += g_m * 2.0 * dx * dy
                    buf[e, 4] += g_m * dy * dy
    return buf


@nb.njit(cache=True)
def reduce_intersections(ids, buf, n_gaussians):
    out = np.zeros((n_gaussians, buf.shape[1]))
    for k in range(ids.shape[0]):
        g = ids[k]
        for c in range(buf.shape[1]):
            out[g, c] += buf[k, c]
    return out
