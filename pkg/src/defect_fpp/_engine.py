"""Compiled Dijkstra over balls with lazily generated edges.

Nodes are closed balls (query points are balls of radius 0).  The edge
between balls i and j weighs ``max(0, |c_i - c_j| - r_i - r_j)``, so
overlapping balls are joined at no cost.

Exactness for xi = 0:
  * any continuum path visiting components C_1..C_k in order spends free
    length at least the sum of consecutive component gaps, since between
    leaving C_i and entering C_{i+1} it crosses at least gap(C_i, C_{i+1});
  * a component gap is attained by some member pair (i, j), and inside a
    component the overlap chain between any two members costs 0, so the
    ball graph has a path of exactly that total weight, realised by
    straight segments between closest boundary points.

Edges are never stored.  Settling ball a schedules a sequence of shell
events: event j fires at key ``dist(a) + G_j`` and relaxes the unsettled balls
whose gap from a lies in ``[G_j, G_{j+1})``.  A relaxation through a at gap g
is therefore applied no later than key ``dist(a) + g``, which is all Dijkstra
needs.  The shells double, so by the time a shell fires most of
its balls are already settled (the metric is strictly shorter than the
Euclidean one); they are skipped via a pyramid of unsettled-ball counts
whose blocks double in size per level, together with the block's gap range.

A ball has at most one queued entry at a time (its tentative label before it
settles, its next shell event afterwards), so the queue is an indexed binary
heap with decrease-key.
"""

from __future__ import annotations

import math

import numba
import numpy as np

SHELL_RATIO = 2.0


def shells(cell_size: float, span: float) -> np.ndarray:
    """Shell boundaries ``0 = G_0 < G_1 < ...`` ending with infinity beyond ``span``."""
    g = [0.0, cell_size]
    while g[-1] <= span:
        g.append(g[-1] * SHELL_RATIO)
    g.append(math.inf)
    return np.array(g)


@numba.njit(cache=True)
def _flat(cell, extent):
    f = 0
    for t in range(extent.shape[0]):
        f = f * extent[t] + cell[t]
    return f


@numba.njit(cache=True)
def _sift_up(hkey, hid, pos, i):
    k = hkey[i]
    v = hid[i]
    while i > 0:
        p = (i - 1) >> 1
        if hkey[p] <= k:
            break
        hkey[i] = hkey[p]
        hid[i] = hid[p]
        pos[hid[i]] = i
        i = p
    hkey[i] = k
    hid[i] = v
    pos[v] = i


@numba.njit(cache=True)
def _sift_down(hkey, hid, pos, i, size):
    k = hkey[i]
    v = hid[i]
    while True:
        c = 2 * i + 1
        if c >= size:
            break
        if c + 1 < size and hkey[c + 1] < hkey[c]:
            c += 1
        if hkey[c] >= k:
            break
        hkey[i] = hkey[c]
        hid[i] = hid[c]
        pos[hid[i]] = i
        i = c
    hkey[i] = k
    hid[i] = v
    pos[v] = i


@numba.njit(cache=True)
def _push(hkey, hid, pos, size, v, key):
    """Insert v or lower its key; returns the new heap size."""
    i = pos[v]
    if i < 0:
        hkey[size] = key
        hid[size] = v
        _sift_up(hkey, hid, pos, size)
        return size + 1
    if key < hkey[i]:
        hkey[i] = key
        _sift_up(hkey, hid, pos, i)
    return size


@numba.njit(cache=True)
def _pop(hkey, hid, pos, size):
    v = hid[0]
    key = hkey[0]
    pos[v] = -1
    size -= 1
    if size > 0:
        hkey[0] = hkey[size]
        hid[0] = hid[size]
        pos[hid[0]] = 0
        _sift_down(hkey, hid, pos, 0, size)
    return v, key, size


def pyramid(extent):
    """Per-level grid shapes and offsets into one flat count array."""
    shapes = [np.asarray(extent, dtype=np.int64)]
    while np.any(shapes[-1] > 1):
        shapes.append((shapes[-1] + 1) // 2)
    shapes = np.array(shapes, dtype=np.int64)
    sizes = np.prod(shapes, axis=1)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return shapes, offsets


@numba.njit(cache=True)
def dijkstra(centers, radii, cell_of, cell_starts, cell_items, shapes, offsets,
             cell_size, origin, rmax, active, gaps, source, targets, plane_axis,
             plane_level, max_gap):
    """Labels from ball ``source`` until every target (or the plane) is settled.

    Returns ``(dist, pred, settled)`` over the balls, with one extra slot at
    index ``n`` for the hyperplane when ``plane_axis >= 0``.
    """
    n = centers.shape[0]
    d = centers.shape[1]
    n_levels = shapes.shape[0]
    extent = shapes[0]
    n_shells = gaps.shape[0] - 1
    dist = np.full(n + 1, np.inf)
    pred = np.full(n + 1, -1, dtype=np.int64)
    settled = np.zeros(n + 1, dtype=np.bool_)
    shell = np.zeros(n + 1, dtype=np.int64)

    hkey = np.empty(n + 1)
    hid = np.empty(n + 1, dtype=np.int64)
    pos = np.full(n + 1, -1, dtype=np.int64)
    size = 0

    cnt = np.zeros(offsets[n_levels], dtype=np.int64)
    blk = np.empty(d, dtype=np.int64)
    for b in range(n):
        if active[b]:
            for lv in range(n_levels):
                for t in range(d):
                    blk[t] = cell_of[b, t] >> lv
                cnt[offsets[lv] + _flat(blk, shapes[lv])] += 1

    use_plane = plane_axis >= 0
    if use_plane:
        tlist = np.array([n], dtype=np.int64)
    else:
        tlist = targets
    remaining = 0
    is_target = np.zeros(n + 1, dtype=np.bool_)
    for t in tlist:
        if not is_target[t]:
            is_target[t] = True
            remaining += 1

    dist[source] = 0.0
    size = _push(hkey, hid, pos, size, source, 0.0)
    # incumbent: direct connections from the source
    for t in tlist:
        if t == source:
            continue
        if use_plane:
            g = abs(centers[source, plane_axis] - plane_level) - radii[source]
        else:
            s = 0.0
            for k in range(d):
                tt = centers[source, k] - centers[t, k]
                s += tt * tt
            g = math.sqrt(s) - radii[source] - radii[t]
        if g < 0.0:
            g = 0.0
        if g < dist[t]:
            dist[t] = g
            pred[t] = source
            size = _push(hkey, hid, pos, size, t, g)

    upper = np.inf
    if remaining > 0:
        upper = 0.0
        for t in tlist:
            if dist[t] > upper:
                upper = dist[t]

    odo = np.empty(d, dtype=np.int64)
    cell = np.empty(d, dtype=np.int64)
    # explicit stack of (level, block coords) for the descent
    stack = np.empty((3**d + n_levels * (1 << d) + 1, d + 1), dtype=np.int64)

    while size > 0:
        a, key, size = _pop(hkey, hid, pos, size)
        if key > upper:
            break
        if not settled[a]:
            settled[a] = True
            if is_target[a]:
                remaining -= 1
                if remaining == 0:
                    break
            if a == n:
                continue
            if active[a]:
                for lv in range(n_levels):
                    for t in range(d):
                        blk[t] = cell_of[a, t] >> lv
                    cnt[offsets[lv] + _flat(blk, shapes[lv])] -= 1
            if use_plane:
                g = abs(centers[a, plane_axis] - plane_level) - radii[a]
                if g < 0.0:
                    g = 0.0
                nd = key + g
                if nd < dist[n]:
                    dist[n] = nd
                    pred[n] = a
                    size = _push(hkey, hid, pos, size, n, nd)
                    upper = nd
        j = shell[a]
        g_lo = gaps[j]
        g_hi = gaps[j + 1]
        da = dist[a]
        ra = radii[a]
        # coarsest level needed: 3^d blocks around a cover every gap < g_hi
        top_lev = 0
        while top_lev + 1 < n_levels and (1 << top_lev) * cell_size < g_hi + ra + rmax:
            top_lev += 1
        top = 0
        for t in range(d):
            odo[t] = -1
        while True:
            ok = True
            for t in range(d):
                blk[t] = (cell_of[a, t] >> top_lev) + odo[t]
                if blk[t] < 0 or blk[t] >= shapes[top_lev, t]:
                    ok = False
            if ok:
                stack[top, 0] = top_lev
                for t in range(d):
                    stack[top, t + 1] = blk[t]
                top += 1
            t = d - 1
            while t >= 0:
                odo[t] += 1
                if odo[t] <= 1:
                    break
                odo[t] = -1
                t -= 1
            if t < 0:
                break
        target_changed = False
        while top > 0:
            top -= 1
            lv = stack[top, 0]
            for t in range(d):
                blk[t] = stack[top, t + 1]
            if cnt[offsets[lv] + _flat(blk, shapes[lv])] == 0:
                continue
            smin = 0.0
            smax = 0.0
            for t in range(d):
                bl = origin[t] + (blk[t] << lv) * cell_size
                bh = origin[t] + ((blk[t] + 1) << lv) * cell_size
                x = centers[a, t]
                if x < bl:
                    smin += (bl - x) * (bl - x)
                elif x > bh:
                    smin += (x - bh) * (x - bh)
                far = max(x - bl, bh - x)
                smax += far * far
            if math.sqrt(smin) - ra - rmax >= g_hi or math.sqrt(smax) - ra < g_lo:
                continue
            if lv > 0:
                for m in range(1 << d):
                    ok = True
                    for t in range(d):
                        cell[t] = 2 * blk[t] + ((m >> t) & 1)
                        if cell[t] >= shapes[lv - 1, t]:
                            ok = False
                    if ok:
                        stack[top, 0] = lv - 1
                        for t in range(d):
                            stack[top, t + 1] = cell[t]
                        top += 1
                continue
            f = _flat(blk, extent)
            for q in range(cell_starts[f], cell_starts[f + 1]):
                b = cell_items[q]
                if settled[b] or not active[b]:
                    continue
                s = 0.0
                for k in range(d):
                    tt = centers[a, k] - centers[b, k]
                    s += tt * tt
                g = math.sqrt(s) - ra - radii[b]
                if g < 0.0:
                    g = 0.0
                if g < g_lo or g >= g_hi or g > max_gap:
                    continue
                nd = da + g
                if nd < dist[b]:
                    dist[b] = nd
                    pred[b] = a
                    size = _push(hkey, hid, pos, size, b, nd)
                    if is_target[b]:
                        target_changed = True
        if target_changed:
            upper = 0.0
            for t in tlist:
                if not settled[t] and dist[t] > upper:
                    upper = dist[t]
        if j + 1 < n_shells:
            nxt = gaps[j + 1]
            if nxt <= max_gap and da + nxt <= upper:
                shell[a] = j + 1
                size = _push(hkey, hid, pos, size, a, da + nxt)
    return dist, pred, settled
