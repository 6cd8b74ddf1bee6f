"""Compiled tile rasterization kernels.

Pixels are sampled at half-integer coordinates (pixel (row, col) sits at
(col + 0.5, row + 0.5)).  Per pixel, splats composite front to back; a splat
that would push transmittance below ``TERMINATION_T`` is skipped and the
scan stops there, matching the usual splatting rasterizer semantics.
Contributions with ``exp`` argument below ``POWER_CUTOFF`` are treated as
exactly zero so tile binning at a finite radius stays consistent with the
compositing math.

The parallel variants split work over tiles; forward writes are disjoint
per pixel and backward accumulates into per-(tile, splat) pair slots, so
the parallel schedule cannot reorder any floating-point reduction.
"""

import math

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99
TERMINATION_T = 1e-4
POWER_CUTOFF = -30.0


@njit(cache=True)
def _forward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                  mean2d, conic, rcut, opac, colors, out_rgb, out_t):
    s0 = tile_start[t]
    s1 = tile_start[t + 1]
    if s1 == s0:
        return
    ty = t // tiles_x
    tx = t % tiles_x
    y1 = min((ty + 1) * tile, height)
    x1 = min((tx + 1) * tile, width)
    for py in range(ty * tile, y1):
        pyc = py + 0.5
        for px in range(tx * tile, x1):
            pxc = px + 0.5
            trans = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for k in range(s0, s1):
                g = pair_splat[k]
                dx = pxc - mean2d[g, 0]
                if abs(dx) > rcut[g]:
                    continue
                dy = pyc - mean2d[g, 1]
                if abs(dy) > rcut[g]:
                    continue
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                    - conic[g, 1] * dx * dy
                if power < POWER_CUTOFF:
                    continue
                alpha = opac[g] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                test_t = trans * (1.0 - alpha)
                if test_t < TERMINATION_T:
                    break
                w = alpha * trans
                cr += colors[g, 0] * w
                cg += colors[g, 1] * w
                cb += colors[g, 2] * w
                trans = test_t
            out_rgb[py, px, 0] = cr
            out_rgb[py, px, 1] = cg
            out_rgb[py, px, 2] = cb
            out_t[py, px] = trans


@njit(cache=True)
def forward_serial(n_tiles, tiles_x, tile, width, height, tile_start, pair_splat,
                   mean2d, conic, rcut, opac, colors, out_rgb, out_t):
    for t in range(n_tiles):
        _forward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                      mean2d, conic, rcut, opac, colors, out_rgb, out_t)


@njit(cache=True, parallel=True)
def forward_parallel(n_tiles, tiles_x, tile, width, height, tile_start, pair_splat,
                     mean2d, conic, rcut, opac, colors, out_rgb, out_t):
    for t in prange(n_tiles):
        _forward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                      mean2d, conic, rcut, opac, colors, out_rgb, out_t)


@njit(cache=True)
def _backward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                   mean2d, conic, rcut, opac, colors, upstream, background,
                   g_mean2d, g_conic, g_opac, g_color):
    s0 = tile_start[t]
    s1 = tile_start[t + 1]
    n = s1 - s0
    if n == 0:
        return
    ty = t // tiles_x
    tx = t % tiles_x
    y1 = min((ty + 1) * tile, height)
    x1 = min((tx + 1) * tile, width)
    alpha_buf = np.empty(n, dtype=np.float64)
    for py in range(ty * tile, y1):
        pyc = py + 0.5
        for px in range(tx * tile, x1):
            pxc = px + 0.5
            # Forward rescan: alphas and the termination point for this pixel.
            trans = 1.0
            ncontrib = 0
            for k in range(n):
                g = pair_splat[s0 + k]
                dx = pxc - mean2d[g, 0]
                dy = pyc - mean2d[g, 1]
                if abs(dx) > rcut[g] or abs(dy) > rcut[g]:
                    alpha_buf[k] = 0.0
                    continue
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                    - conic[g, 1] * dx * dy
                if power < POWER_CUTOFF:
                    alpha_buf[k] = 0.0
                    continue
                alpha = opac[g] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                test_t = trans * (1.0 - alpha)
                if test_t < TERMINATION_T:
                    break
                alpha_buf[k] = alpha
                trans = test_t
                ncontrib = k + 1
            t_final = trans
            up_r = upstream[py, px, 0]
            up_g = upstream[py, px, 1]
            up_b = upstream[py, px, 2]
            if up_r == 0.0 and up_g == 0.0 and up_b == 0.0:
                continue
            bg_dot = background[0] * up_r + background[1] * up_g + background[2] * up_b
            # Back-to-front scan; accum_* tracks the blended color behind the
            # current splat, which the alpha gradient needs.
            accum_r = 0.0
            accum_g = 0.0
            accum_b = 0.0
            last_alpha = 0.0
            last_r = 0.0
            last_g = 0.0
            last_b = 0.0
            trans = t_final
            for k in range(ncontrib - 1, -1, -1):
                alpha = alpha_buf[k]
                if alpha == 0.0:
                    continue
                g = pair_splat[s0 + k]
                one_m = 1.0 - alpha
                trans = trans / one_m
                accum_r = last_alpha * last_r + (1.0 - last_alpha) * accum_r
                accum_g = last_alpha * last_g + (1.0 - last_alpha) * accum_g
                accum_b = last_alpha * last_b + (1.0 - last_alpha) * accum_b
                dl_da = ((colors[g, 0] - accum_r) * up_r
                         + (colors[g, 1] - accum_g) * up_g
                         + (colors[g, 2] - accum_b) * up_b) * trans
                dl_da -= (t_final / one_m) * bg_dot
                w = alpha * trans
                g_color[s0 + k, 0] += w * up_r
                g_color[s0 + k, 1] += w * up_g
                g_color[s0 + k, 2] += w * up_b
                last_r = colors[g, 0]
                last_g = colors[g, 1]
                last_b = colors[g, 2]
                last_alpha = alpha
                if alpha < ALPHA_MAX:
                    dx = pxc - mean2d[g, 0]
                    dy = pyc - mean2d[g, 1]
                    gdl = dl_da * alpha
                    g_mean2d[s0 + k, 0] += gdl * (conic[g, 0] * dx + conic[g, 1] * dy)
                    g_mean2d[s0 + k, 1] += gdl * (conic[g, 1] * dx + conic[g, 2] * dy)
                    g_conic[s0 + k, 0] -= 0.5 * gdl * dx * dx
                    g_conic[s0 + k, 1] -= gdl * dx * dy
                    g_conic[s0 + k, 2] -= 0.5 * gdl * dy * dy
                    g_opac[s0 + k] += dl_da * (alpha / opac[g])


@njit(cache=True)
def backward_serial(n_tiles, tiles_x, tile, width, height, tile_start, pair_splat,
                    mean2d, conic, rcut, opac, colors, upstream, background,
                    g_mean2d, g_conic, g_opac, g_color):
    for t in range(n_tiles):
        _backward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                       mean2d, conic, rcut, opac, colors, upstream, background,
                       g_mean2d, g_conic, g_opac, g_color)


@njit(cache=True, parallel=True)
def backward_parallel(n_tiles, tiles_x, tile, width, height, tile_start, pair_splat,
                      mean2d, conic, rcut, opac, colors, upstream, background,
                      g_mean2d, g_conic, g_opac, g_color):
    for t in prange(n_tiles):
        _backward_tile(t, tiles_x, tile, width, height, tile_start, pair_splat,
                       mean2d, conic, rcut, opac, colors, upstream, background,
                       g_mean2d, g_conic, g_opac, g_color)
