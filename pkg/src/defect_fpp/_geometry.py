"""Compiled helpers for the union of balls: uncovered boundary arcs and depth below the boundary."""

from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi


@numba.njit(cache=True)
def uncovered_arcs(centers, r, nb_starts, nb_items):
    """Arcs of each circle not inside any neighbouring disk (d = 2).

    Neighbours of ball j are ``nb_items[nb_starts[j]:nb_starts[j + 1]]``.
    Returns CSR arrays ``(arc_starts, arc_lo, arc_hi)`` with angles in
    ``[0, 2 pi]``; a wrapped arc is split in two.
    """
    n = centers.shape[0]
    counts = np.zeros(n + 1, dtype=np.int64)
    max_nb = 0
    for j in range(n):
        m = nb_starts[j + 1] - nb_starts[j]
        if m > max_nb:
            max_nb = m
    lo_buf = np.empty(2 * max_nb + 2)
    hi_buf = np.empty(2 * max_nb + 2)
    out_lo = np.empty(2 * (nb_starts[n] + n) + 2)
    out_hi = np.empty(2 * (nb_starts[n] + n) + 2)
    total = 0
    for j in range(n):
        k = 0
        full = False
        for q in range(nb_starts[j], nb_starts[j + 1]):
            i = nb_items[q]
            dx = centers[i, 0] - centers[j, 0]
            dy = centers[i, 1] - centers[j, 1]
            dd = math.sqrt(dx * dx + dy * dy)
            if dd >= 2.0 * r:
                continue
            if dd == 0.0:
                # duplicates: the lowest index keeps the shared circle
                if i < j:
                    full = True
                    break
                continue
            phi = math.atan2(dy, dx)
            if phi < 0.0:
                phi += TWO_PI
            alpha = math.acos(dd / (2.0 * r))
            a = phi - alpha
            b = phi + alpha
            if a < 0.0:
                lo_buf[k] = a + TWO_PI
                hi_buf[k] = TWO_PI
                k += 1
                a = 0.0
            if b > TWO_PI:
                lo_buf[k] = 0.0
                hi_buf[k] = b - TWO_PI
                k += 1
                b = TWO_PI
            lo_buf[k] = a
            hi_buf[k] = b
            k += 1
        if not full:
            order = np.argsort(lo_buf[:k])
            reach = 0.0
            for t in range(k):
                s = lo_buf[order[t]]
                e = hi_buf[order[t]]
                if s > reach:
                    out_lo[total] = reach
                    out_hi[total] = s
                    total += 1
                if e > reach:
                    reach = e
            if reach < TWO_PI:
                out_lo[total] = reach
                out_hi[total] = TWO_PI
                total += 1
        counts[j + 1] = total
    return counts, out_lo[:total].copy(), out_hi[:total].copy()


@numba.njit(cache=True)
def _arc_distance(cx, cy, r, lo, hi, px, py):
    dx = px - cx
    dy = py - cy
    rho = math.sqrt(dx * dx + dy * dy)
    theta = math.atan2(dy, dx) if rho > 0.0 else 0.0
    if theta < 0.0:
        theta += TWO_PI
    if rho == 0.0 or (lo <= theta <= hi):
        return abs(rho - r)
    ex = cx + r * math.cos(lo) - px
    ey = cy + r * math.sin(lo) - py
    best = math.sqrt(ex * ex + ey * ey)
    ex = cx + r * math.cos(hi) - px
    ey = cy + r * math.sin(hi) - py
    return min(best, math.sqrt(ex * ex + ey * ey))


@numba.njit(cache=True)
def depth(centers, r, arc_starts, arc_lo, arc_hi, origin, s, shape, cell_starts, cell_items,
          probes):
    """Distance from each probe to the complement of the union of disks (d = 2).

    Balls are bucketed in a grid of cell size ``s >= r`` (``cell_items`` sorted by
    row-major cell id).  A covered probe's nearest vacant point lies on an
    uncovered arc; rings of cells are scanned outward until the ring's lower
    distance bound minus r exceeds the best arc distance found.
    """
    m = probes.shape[0]
    nx = shape[0]
    ny = shape[1]
    out = np.zeros(m)
    for k in range(m):
        px = probes[k, 0]
        py = probes[k, 1]
        ix = int(math.floor((px - origin[0]) / s))
        iy = int(math.floor((py - origin[1]) / s))
        covered = False
        for gx in range(max(ix - 1, 0), min(ix + 2, nx)):
            for gy in range(max(iy - 1, 0), min(iy + 2, ny)):
                c = gx * ny + gy
                for q in range(cell_starts[c], cell_starts[c + 1]):
                    j = cell_items[q]
                    dx = px - centers[j, 0]
                    dy = py - centers[j, 1]
                    if dx * dx + dy * dy <= r * r:
                        covered = True
                        break
                if covered:
                    break
            if covered:
                break
        if not covered:
            continue
        best = np.inf
        reach = max(ix + 1, nx - ix, iy + 1, ny - iy)
        for ring in range(reach + 1):
            if (ring - 1) * s - r >= best:
                break
            for gx in range(ix - ring, ix + ring + 1):
                if gx < 0 or gx >= nx:
                    continue
                edge = gx == ix - ring or gx == ix + ring
                step = 1 if edge else 2 * ring
                gy = iy - ring
                while gy <= iy + ring:
                    if 0 <= gy < ny:
                        c = gx * ny + gy
                        for q in range(cell_starts[c], cell_starts[c + 1]):
                            j = cell_items[q]
                            if arc_starts[j] == arc_starts[j + 1]:
                                continue
                            dx = px - centers[j, 0]
                            dy = py - centers[j, 1]
                            if abs(math.sqrt(dx * dx + dy * dy) - r) >= best:
                                continue
                            for t in range(arc_starts[j], arc_starts[j + 1]):
                                v = _arc_distance(centers[j, 0], centers[j, 1], r,
                                                  arc_lo[t], arc_hi[t], px, py)
                                if v < best:
                                    best = v
                    if step == 0:
                        break
                    gy += step
        out[k] = best
    return out


def grid_buckets(centers: np.ndarray, s: float):
    """Row-major cell buckets: ``(origin, shape, cell_starts, cell_items)``."""
    origin = centers.min(0) if len(centers) else np.zeros(centers.shape[1])
    cells = np.floor((centers - origin) / s).astype(np.int64)
    shape = (cells.max(0) + 1 if len(centers) else np.ones(centers.shape[1])).astype(np.int64)
    flat = np.ravel_multi_index(cells.T, shape)
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(int(np.prod(shape)) + 1)).astype(np.int64)
    return origin, shape, starts, order.astype(np.int64)


def neighbour_csr(n: int, ii: np.ndarray, jj: np.ndarray):
    """Symmetric CSR adjacency from an undirected pair list."""
    src = np.concatenate([ii, jj]).astype(np.int64)
    dst = np.concatenate([jj, ii]).astype(np.int64)
    order = np.argsort(src, kind="stable")
    starts = np.searchsorted(src[order], np.arange(n + 1)).astype(np.int64)
    return starts, dst[order]
