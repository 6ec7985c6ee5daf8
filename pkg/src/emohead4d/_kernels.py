"""Per-tile compositing kernels (numba).

Each tile only reads its own slice of the tile/Gaussian pair list and writes
its own pixels / pair slots, so results do not depend on thread scheduling.
"""
import math
import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange  # noqa: E402

TILE = 16


@njit(parallel=True, cache=True)
def forward_tiles(offsets, ids, mean2d, conic, opacity, rgb, bg, width, height, tiles_x,
                  max_power, alpha_max, t_min, out_rgb, out_T, out_n):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n = end - start
                for k in range(start, end):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                    if power > max_power:
                        continue
                    a = opacity[g] * math.exp(-power)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    c0 += rgb[g, 0] * w
                    c1 += rgb[g, 1] * w
                    c2 += rgb[g, 2] * w
                    T *= 1.0 - a
                    if T < t_min:
                        n = k - start + 1
                        break
                out_rgb[i, j, 0] = c0 + bg[0] * T
                out_rgb[i, j, 1] = c1 + bg[1] * T
                out_rgb[i, j, 2] = c2 + bg[2] * T
                out_T[i, j] = T
                out_n[i, j] = n


@njit(parallel=True, cache=True)
def backward_tiles(offsets, ids, mean2d, conic, opacity, rgb, bg, width, height, tiles_x,
                   max_power, alpha_max, final_T, n_contrib, grad_img, pair_grad):
    """Accumulate per-pair gradients.

    ``pair_grad[k]`` holds ``(d rgb[3], d opacity, d mean2d[2], d conic[A, B, C])``
    for pair slot ``k``. The conic gradient is taken w.r.t. the scalar
    entries of ``power = 0.5 (A dx^2 + C dy^2) + B dx dy``.
    """
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                G0 = grad_img[i, j, 0]
                G1 = grad_img[i, j, 1]
                G2 = grad_img[i, j, 2]
                if G0 == 0.0 and G1 == 0.0 and G2 == 0.0:
                    continue
                T = final_T[i, j]
                b0 = bg[0] * T
                b1 = bg[1] * T
                b2 = bg[2] * T
                for k in range(start + n_contrib[i, j] - 1, start - 1, -1):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    A = conic[g, 0]
                    B = conic[g, 1]
                    C = conic[g, 2]
                    power = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
                    if power > max_power:
                        continue
                    ge = math.exp(-power)
                    a_raw = opacity[g] * ge
                    a = a_raw
                    if a > alpha_max:
                        a = alpha_max
                    T = T / (1.0 - a)
                    w = a * T
                    pair_grad[k, 0] += w * G0
                    pair_grad[k, 1] += w * G1
                    pair_grad[k, 2] += w * G2
                    inv = 1.0 / (1.0 - a)
                    dL_da = (G0 * (rgb[g, 0] * T - b0 * inv) + G1 * (rgb[g, 1] * T - b1 * inv)
                             + G2 * (rgb[g, 2] * T - b2 * inv))
                    b0 += rgb[g, 0] * w
                    b1 += rgb[g, 1] * w
                    b2 += rgb[g, 2] * w
                    if a_raw < alpha_max:
                        pair_grad[k, 3] += dL_da * ge
                        dpow = -dL_da * a
                        pair_grad[k, 4] += -dpow * (A * dx + B * dy)
                        pair_grad[k, 5] += -dpow * (B * dx + C * dy)
                        pair_grad[k, 6] += dpow * 0.5 * dx * dx
                        pair_grad[k, 7] += dpow * dx * dy
                        pair_grad[k, 8] += dpow * 0.5 * dy * dy


def set_threads(n):
    import numba
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
