"""Compiled per-pixel compositing kernels.

All loops are serial, so every pixel and every gradient accumulation happens in
a fixed order and results are bitwise reproducible.
"""

import numpy as np
import numba as nb

TILE = 8


@nb.njit(cache=True)
def bin_splats(order, rect, tiles_x, tiles_y):
    """Bucket depth-sorted splats into screen tiles.

    ``rect[s] = (tx0, ty0, tx1, ty1)`` is the half-open tile range touched by
    splat ``s``. Lists inherit the order of ``order``.
    """
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    for s in order:
        for ty in range(rect[s, 1], rect[s, 3]):
            for tx in range(rect[s, 0], rect[s, 2]):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    cursor = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    for s in order:
        for ty in range(rect[s, 1], rect[s, 3]):
            for tx in range(rect[s, 0], rect[s, 2]):
                t = ty * tiles_x + tx
                lists[cursor[t]] = s
                cursor[t] += 1
    return offsets, lists


@nb.njit(cache=True)
def forward(offsets, lists, tiles_x, width, height, means, conics, opac, colors, depths,
            min_power, bg, far, alpha_min, t_min):
    color = np.empty((height, width, 3))
    depth = np.empty((height, width))
    trans = np.empty((height, width))
    stop = np.zeros((height, width), np.int64)
    tiles_y = (height + TILE - 1) // TILE
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start = offsets[t]
            end = offsets[t + 1]
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                fy = py + 0.5
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    fx = px + 0.5
                    T = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    d = 0.0
                    last = end
                    for i in range(start, end):
                        s = lists[i]
                        dx = fx - means[s, 0]
                        dy = fy - means[s, 1]
                        power = -0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy) - conics[s, 1] * dx * dy
                        if power < min_power[s]:
                            continue
                        a = opac[s] * np.exp(power)
                        if a > 0.999:
                            a = 0.999
                        if a < alpha_min:
                            continue
                        test_T = T * (1.0 - a)
                        if test_T < t_min:
                            last = i
                            break
                        w = a * T
                        c0 += colors[s, 0] * w
                        c1 += colors[s, 1] * w
                        c2 += colors[s, 2] * w
                        d += depths[s] * w
                        T = test_T
                    color[py, px, 0] = c0 + T * bg[0]
                    color[py, px, 1] = c1 + T * bg[1]
                    color[py, px, 2] = c2 + T * bg[2]
                    depth[py, px] = d + T * far
                    trans[py, px] = T
                    stop[py, px] = last
    return color, depth, trans, stop


@nb.njit(cache=True)
def backward(offsets, lists, tiles_x, width, height, means, conics, opac, colors, depths,
             min_power, alpha_min, out_color, out_depth, trans, stop, g_color_px, g_depth_px, g_alpha_px):
    """Per-splat gradients for a batch of B pixel adjoints.

    Returns gradients w.r.t. 2D mean, conic (a, b, c), base opacity, color and
    camera depth, each with a leading batch axis.
    """
    B = g_color_px.shape[0]
    n = means.shape[0]
    g_mean = np.zeros((B, n, 2))
    g_conic = np.zeros((B, n, 3))
    g_opac = np.zeros((B, n))
    g_col = np.zeros((B, n, 3))
    g_dep = np.zeros((B, n))
    tiles_y = (height + TILE - 1) // TILE
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start = offsets[t]
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                fy = py + 0.5
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    fx = px + 0.5
                    last = stop[py, px]
                    Tn = trans[py, px]
                    Cf0 = out_color[py, px, 0]
                    Cf1 = out_color[py, px, 1]
                    Cf2 = out_color[py, px, 2]
                    Df = out_depth[py, px]
                    T = 1.0
                    acc0 = 0.0
                    acc1 = 0.0
                    acc2 = 0.0
                    accd = 0.0
                    for i in range(start, last):
                        s = lists[i]
                        dx = fx - means[s, 0]
                        dy = fy - means[s, 1]
                        power = -0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy) - conics[s, 1] * dx * dy
                        if power < min_power[s]:
                            continue
                        G = np.exp(power)
                        a = opac[s] * G
                        clamped = False
                        if a > 0.999:
                            a = 0.999
                            clamped = True
                        if a < alpha_min:
                            continue
                        w = a * T
                        acc0 += colors[s, 0] * w
                        acc1 += colors[s, 1] * w
                        acc2 += colors[s, 2] * w
                        accd += depths[s] * w
                        inv = 1.0 / (1.0 - a)
                        dc0 = colors[s, 0] * T - (Cf0 - acc0) * inv
                        dc1 = colors[s, 1] * T - (Cf1 - acc1) * inv
                        dc2 = colors[s, 2] * T - (Cf2 - acc2) * inv
                        dd = depths[s] * T - (Df - accd) * inv
                        da = Tn * inv
                        for b in range(B):
                            gc0 = g_color_px[b, py, px, 0]
                            gc1 = g_color_px[b, py, px, 1]
                            gc2 = g_color_px[b, py, px, 2]
                            gd = g_depth_px[b, py, px]
                            ga = g_alpha_px[b, py, px]
                            g_col[b, s, 0] += gc0 * w
                            g_col[b, s, 1] += gc1 * w
                            g_col[b, s, 2] += gc2 * w
                            g_dep[b, s] += gd * w
                            if not clamped:
                                galpha = gc0 * dc0 + gc1 * dc1 + gc2 * dc2 + gd * dd + ga * da
                                g_opac[b, s] += galpha * G
                                gp = galpha * a
                                g_mean[b, s, 0] += gp * (conics[s, 0] * dx + conics[s, 1] * dy)
                                g_mean[b, s, 1] += gp * (conics[s, 1] * dx + conics[s, 2] * dy)
                                g_conic[b, s, 0] -= 0.5 * gp * dx * dx
                                g_conic[b, s, 1] -= gp * dx * dy
                                g_conic[b, s, 2] -= 0.5 * gp * dy * dy
                        T = T * (1.0 - a)
    return g_mean, g_conic, g_opac, g_col, g_dep
