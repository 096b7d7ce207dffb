"""Connected components of the union of closed balls (the Boolean model).

Overlap candidates come from a uniform hash grid; components are merged
with a disjoint-set forest (union by rank, path halving).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import InvalidParameter, NotFound, PointConfiguration, as_point


class SpatialIndex:
    """Uniform grid mapping integer cell coordinates to the centers they contain.

    Parameters
    ----------
    centers : (n, d) array
    cell_size : float
        Cell side length.  With ``cell_size >= 2 * radius`` every overlapping
        pair lies in the same or adjacent cells.
    """

    def __init__(self, centers, cell_size: float):
        if not cell_size > 0:
            raise InvalidParameter("cell_size must be positive")
        self.centers = np.asarray(centers, dtype=float)
        self.cell_size = float(cell_size)
        n, d = self.centers.shape
        self.d = d
        if n == 0:
            self.origin = np.zeros(d)
            self.extent = np.ones(d, dtype=np.int64)
            self.cells = np.zeros((0, d), dtype=np.int64)
            self.keys = np.zeros(0, dtype=np.int64)
            self.starts = np.zeros(1, dtype=np.int64)
            self.order = np.zeros(0, dtype=np.int64)
            return
        self.origin = self.centers.min(0)
        cells = np.floor((self.centers - self.origin) / self.cell_size).astype(np.int64)
        self.extent = cells.max(0) + 1
        self.cells = cells
        flat = np.ravel_multi_index(cells.T, self.extent)
        order = np.argsort(flat, kind="stable")
        sorted_keys = flat[order]
        keys, first = np.unique(sorted_keys, return_index=True)
        self.keys = keys
        self.starts = np.append(first, n).astype(np.int64)
        self.order = order

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def n_cells(self) -> int:
        return self.keys.shape[0]

    def cell_of(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.cell_size).astype(np.int64)

    def cell_members(self, cell) -> np.ndarray:
        cell = np.asarray(cell, dtype=np.int64)
        if np.any(cell < 0) or np.any(cell >= self.extent):
            return np.zeros(0, dtype=np.int64)
        key = np.ravel_multi_index(cell, self.extent)
        pos = np.searchsorted(self.keys, key)
        if pos >= self.keys.shape[0] or self.keys[pos] != key:
            return np.zeros(0, dtype=np.int64)
        return self.order[self.starts[pos]:self.starts[pos + 1]]

    def query(self, p, radius: float, return_cells: bool = False):
        """Candidate center indices within ``radius`` of ``p`` (a superset).

        With ``return_cells`` the list of occupied cells that were visited is
        returned as well.
        """
        p = as_point(p, self.d)
        lo = self.cell_of(p - radius)
        hi = self.cell_of(p + radius)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self.extent - 1)
        found, visited = [], []
        if len(self) and np.all(lo <= hi):
            for cell in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
                members = self.cell_members(cell)
                if members.size:
                    found.append(members)
                    visited.append(cell)
        idx = np.concatenate(found) if found else np.zeros(0, dtype=np.int64)
        return (idx, visited) if return_cells else idx

    def neighbors(self, p, radius: float) -> np.ndarray:
        """Exact indices of centers within ``radius`` of ``p`` (closed ball), sorted."""
        cand = self.query(p, radius)
        if cand.size == 0:
            return cand
        dist = np.linalg.norm(self.centers[cand] - as_point(p, self.d), axis=1)
        return np.sort(cand[dist <= radius])

    def pairs_within(self, max_dist: float) -> tuple[np.ndarray, np.ndarray]:
        """All index pairs ``i < j`` with ``|c_i - c_j| <= max_dist``."""
        n = len(self)
        empty = np.zeros(0, dtype=np.int64)
        if n < 2:
            return empty, empty
        reach = int(math.ceil(max_dist / self.cell_size))
        ucells = np.array(np.unravel_index(self.keys, self.extent)).T
        counts = np.diff(self.starts)
        offsets = [o for o in itertools.product(range(-reach, reach + 1), repeat=self.d)
                   if o > (0,) * self.d or o == (0,) * self.d]
        out_i, out_j = [], []
        for off in offsets:
            nb = ucells + np.array(off, dtype=np.int64)
            ok = np.all((nb >= 0) & (nb < self.extent), axis=1)
            src = np.nonzero(ok)[0]
            nkey = np.ravel_multi_index(nb[ok].T, self.extent)
            pos = np.searchsorted(self.keys, nkey)
            pos = np.minimum(pos, self.keys.shape[0] - 1)
            hit = self.keys[pos] == nkey
            a, b = src[hit], pos[hit]
            ca, cb = counts[a], counts[b]
            tot = ca * cb
            if tot.sum() == 0:
                continue
            t = np.repeat(np.arange(a.shape[0]), tot)
            local = np.arange(tot.sum()) - np.repeat(np.cumsum(tot) - tot, tot)
            ia = self.order[self.starts[a[t]] + local // cb[t]]
            ib = self.order[self.starts[b[t]] + local % cb[t]]
            if off == (0,) * self.d:
                keep = ia < ib
                ia, ib = ia[keep], ib[keep]
            dist2 = ((self.centers[ia] - self.centers[ib]) ** 2).sum(1)
            keep = dist2 <= max_dist * max_dist
            ia, ib = ia[keep], ib[keep]
            out_i.append(np.minimum(ia, ib))
            out_j.append(np.maximum(ia, ib))
        if not out_i:
            return empty, empty
        return np.concatenate(out_i), np.concatenate(out_j)


def build_index(config: PointConfiguration, cell_size: float | None = None) -> SpatialIndex:
    return SpatialIndex(config.centers, cell_size if cell_size else 2.0 * config.radius)


@numba.njit(cache=True)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@numba.njit(cache=True)
def _union_pairs(n, ii, jj):
    parent = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    for k in range(ii.shape[0]):
        a = _find(parent, ii[k])
        b = _find(parent, jj[k])
        if a == b:
            continue
        if rank[a] < rank[b]:
            a, b = b, a
        parent[b] = a
        if rank[a] == rank[b]:
            rank[a] += 1
    for x in range(n):
        parent[x] = _find(parent, x)
    return parent, rank


@numba.njit(cache=True)
def _diameters(centers, starts, items, radius):
    m = starts.shape[0] - 1
    out = np.empty(m)
    for c in range(m):
        best = 0.0
        for p in range(starts[c], starts[c + 1]):
            for q in range(p + 1, starts[c + 1]):
                s = 0.0
                for k in range(centers.shape[1]):
                    t = centers[items[p], k] - centers[items[q], k]
                    s += t * t
                if s > best:
                    best = s
        out[c] = math.sqrt(best) + 2.0 * radius
    return out


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """Partition of the balls of ``config`` into connected components.

    ``labels[i]`` is the cluster id of ball ``i``; ids are numbered by first
    appearance in ball order.  ``parent``/``rank`` keep the disjoint-set forest.
    """

    config: PointConfiguration
    index: SpatialIndex
    parent: np.ndarray
    rank: np.ndarray
    labels: np.ndarray
    member_starts: np.ndarray
    member_items: np.ndarray
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    _diam: list = field(default_factory=list, repr=False)

    @property
    def n_clusters(self) -> int:
        return self.member_starts.shape[0] - 1

    @property
    def radius(self) -> float:
        return self.config.radius

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.member_starts)

    def members(self, cid: int) -> np.ndarray:
        self._check(cid)
        return self.member_items[self.member_starts[cid]:self.member_starts[cid + 1]]

    def partition(self) -> frozenset:
        """Clusters as a set of frozensets of ball indices."""
        return frozenset(frozenset(self.members(c).tolist()) for c in range(self.n_clusters))

    def diameters(self) -> np.ndarray:
        if not self._diam:
            self._diam.append(_diameters(self.config.centers, self.member_starts,
                                         self.member_items, self.config.radius))
        return self._diam[0]

    def _check(self, cid):
        if not (isinstance(cid, (int, np.integer)) and 0 <= cid < self.n_clusters):
            raise NotFound(f"no cluster with id {cid!r}")

    def to_csv(self, path=None) -> str:
        d = self.config.d
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cluster_id", "size", "diameter"] + [f"bbox_lo_{k}" for k in range(d)]
                   + [f"bbox_hi_{k}" for k in range(d)])
        diam = self.diameters()
        for c in range(self.n_clusters):
            w.writerow([c, int(self.sizes[c]), repr(float(diam[c]))]
                       + [repr(float(v)) for v in self.bbox_lo[c]]
                       + [repr(float(v)) for v in self.bbox_hi[c]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def find_clusters(config: PointConfiguration, index: SpatialIndex | None = None) -> ClusterSet:
    """Union-find over all pairs of closed balls with ``|c_i - c_j| <= 2 r``."""
    n, d = config.centers.shape
    index = index if index is not None else build_index(config)
    ii, jj = index.pairs_within(2.0 * config.radius)
    parent, rank = _union_pairs(n, ii.astype(np.int64), jj.astype(np.int64))
    roots = parent
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # renumber by first appearance so ids do not depend on root choice
    rank_of_root = np.argsort(np.argsort(first))
    labels = rank_of_root[inverse].astype(np.int64)
    order = np.argsort(labels, kind="stable")
    k = first.shape[0]
    starts = np.searchsorted(labels[order], np.arange(k + 1)).astype(np.int64)
    if n:
        c = config.centers[order]
        lo = np.minimum.reduceat(c, starts[:-1], axis=0)
        hi = np.maximum.reduceat(c, starts[:-1], axis=0)
    else:
        lo = hi = np.zeros((0, d))
    return ClusterSet(config, index, parent, rank, labels, starts, order.astype(np.int64), lo, hi)


def cluster_diameter(cs: ClusterSet, cid: int) -> float:
    """Euclidean diameter of a component: largest center separation plus one ball diameter."""
    cs._check(cid)
    return float(cs.diameters()[cid])


def _bbox_gap(cs: ClusterSet, a: int, b: int) -> float:
    sep = np.maximum(0.0, np.maximum(cs.bbox_lo[a] - cs.bbox_hi[b], cs.bbox_lo[b] - cs.bbox_hi[a]))
    return float(np.linalg.norm(sep))


def cluster_set_distance(cs: ClusterSet, a: int, b: int, upper: float = math.inf) -> float:
    """Euclidean gap between two components, ``max(0, min |c_i - c_j| - 2r)``.

    When the bounding boxes alone prove the gap is at least ``upper`` the
    (smaller) box bound is returned without scanning member pairs.
    """
    cs._check(a)
    cs._check(b)
    if a == b:
        raise InvalidParameter("cluster_set_distance needs two distinct clusters")
    r2 = 2.0 * cs.radius
    lb = _bbox_gap(cs, a, b) - r2
    if lb >= upper:
        return lb
    pa = cs.config.centers[cs.members(a)]
    pb = cs.config.centers[cs.members(b)]
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return max(0.0, math.sqrt(float(d2.min())) - r2)


def point_cluster_distance(cs: ClusterSet, p, cid: int) -> float:
    cs._check(cid)
    p = as_point(p, cs.config.d)
    pts = cs.config.centers[cs.members(cid)]
    return max(0.0, float(np.sqrt(((pts - p) ** 2).sum(1)).min()) - cs.radius)
