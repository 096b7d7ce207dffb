"""Distances in the defect metric.

``xi = 0``: exact, by Dijkstra over components (see ``_engine``).
``xi > 0``: a refinable upper bound from a graph on boundary points of the balls,
with edges weighted by the exact line integral of the conformal factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as csgraph_dijkstra
from scipy.spatial import cKDTree

from . import _engine
from .clusters import ClusterSet, find_clusters
from .model import Domain, InvalidParameter, PointConfiguration, as_point


@dataclass
class DistanceResult:
    value: float
    geodesic: np.ndarray
    clusters_visited: list = field(default_factory=list)
    exact: bool = True
    refinement: int = 0
    approximate: bool = False

    def to_json(self) -> dict:
        return {"value": float(self.value), "exact": bool(self.exact),
                "refinement": int(self.refinement), "approximate": bool(self.approximate),
                "clusters_visited": [int(c) for c in self.clusters_visited],
                "geodesic": np.asarray(self.geodesic).tolist()}


def _morton(cells: np.ndarray) -> np.ndarray:
    """Z-order keys of nonnegative integer cell coordinates."""
    n, d = cells.shape
    key = np.zeros(n, dtype=np.uint64)
    bits = max(1, int(cells.max()).bit_length()) if n else 1
    for b in range(min(bits, 64 // d)):
        for t in range(d):
            bit = (cells[:, t].astype(np.uint64) >> np.uint64(b)) & np.uint64(1)
            key |= bit << np.uint64(b * d + t)
    return key


class BallGraph:
    """Balls of a configuration plus zero-radius query points, laid out for the compiled search.

    Build once and search from many sources.  ``active`` masks out balls (used
    for domain restriction).  Query point ``k`` is ball ``n_balls + k``.
    """

    def __init__(self, config: PointConfiguration, points, active=None):
        pts = np.asarray(points, dtype=float).reshape(-1, config.d)
        self.config = config
        nb, m = len(config), pts.shape[0]
        self.n_balls = nb
        self.centers = np.ascontiguousarray(np.vstack([config.centers, pts]))
        self.radii = np.concatenate([np.full(nb, config.radius), np.zeros(m)])
        act = np.ones(nb, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        self.active = np.concatenate([act, np.ones(m, dtype=bool)])
        self.rmax = float(config.radius) if nb else 0.0
        s = 2.0 * config.radius
        self.cell_size = s
        origin = self.centers.min(0)
        self.origin = origin
        cell_of = np.floor((self.centers - origin) / s).astype(np.int64)
        self.extent = (cell_of.max(0) + 1).astype(np.int64)
        # the kernel sees balls in Z-order of their cells, which keeps the
        # search's memory accesses local; ``_perm`` maps back to caller ids
        self._perm = np.argsort(_morton(cell_of), kind="stable")
        self._rank = np.empty_like(self._perm)
        self._rank[self._perm] = np.arange(self._perm.shape[0])
        self._centers = np.ascontiguousarray(self.centers[self._perm])
        self._radii = self.radii[self._perm]
        self._active = self.active[self._perm]
        self._cell_of = np.ascontiguousarray(cell_of[self._perm])
        flat = np.ravel_multi_index(self._cell_of.T, self.extent)
        order = np.argsort(flat, kind="stable")
        ncell = int(np.prod(self.extent))
        self.cell_starts = np.searchsorted(flat[order], np.arange(ncell + 1)).astype(np.int64)
        self.cell_items = order.astype(np.int64)
        self.shapes, self.offsets = _engine.pyramid(self.extent)
        span = float(np.linalg.norm(self.centers.max(0) - origin)) if len(self.centers) else 0.0
        self.gaps = _engine.shells(s, span)

    def point(self, k: int) -> int:
        return self.n_balls + k

    def search(self, source: int, targets=(), plane=None, max_gap: float = math.inf):
        """Run the compiled Dijkstra from ball ``source``; ``plane`` is ``(axis, level)``."""
        axis, level = (-1, 0.0) if plane is None else (int(plane[0]), float(plane[1]))
        n = self._perm.shape[0]
        rank = np.append(self._rank, n)
        tg = rank[np.asarray(targets, dtype=np.int64)]
        dist, pred, settled = _engine.dijkstra(
            self._centers, self._radii, self._cell_of, self.cell_starts, self.cell_items,
            self.shapes, self.offsets, self.cell_size, self.origin, self.rmax, self._active,
            self.gaps, int(rank[source]), tg, axis, level, float(max_gap))
        perm = np.append(self._perm, n)
        out_pred = np.where(pred >= 0, perm[np.maximum(pred, 0)], -1)
        return dist[rank], out_pred[rank], settled[rank]

    def chain(self, pred, node: int) -> list[int]:
        out = [node]
        while pred[out[-1]] >= 0:
            out.append(int(pred[out[-1]]))
        return out[::-1]

    def gap(self, i: int, j: int) -> float:
        g = float(np.linalg.norm(self.centers[i] - self.centers[j])) - self.radii[i] - self.radii[j]
        return max(0.0, g)

    def polyline(self, pred, target: int, cs: ClusterSet | None = None,
                 plane=None) -> np.ndarray:
        """Geodesic polyline from the search source to ``target``.

        Free segments join closest boundary points of consecutive balls along
        their center line.  Runs of overlapping balls become center hops,
        shortest among the cluster's members when ``cs`` is given.
        """
        nodes = self.chain(pred, target)
        n = self.n_balls + (self.centers.shape[0] - self.n_balls)
        c = self.centers
        verts = [c[nodes[0]].copy()]
        k = 0
        while k + 1 < len(nodes):
            i, j = nodes[k], nodes[k + 1]
            if j == n:
                ax, lvl = plane
                out = c[i].copy()
                out[ax] += np.sign(lvl - c[i, ax]) * min(self.radii[i], abs(lvl - c[i, ax]))
                end = c[i].copy()
                end[ax] = lvl
                verts.extend([out, end])
                break
            if self.gap(i, j) > 0:
                v = c[j] - c[i]
                u = v / np.linalg.norm(v)
                verts.extend([c[i] + self.radii[i] * u, c[j] - self.radii[j] * u])
                k += 1
                continue
            # run of zero-cost steps inside one component
            e = k
            while e + 1 < len(nodes) and nodes[e + 1] != n and self.gap(nodes[e], nodes[e + 1]) == 0:
                e += 1
            run = nodes[k:e + 1]
            balls = [b for b in run if b < self.n_balls]
            if cs is not None and len(balls) > 1:
                balls = _center_hops(cs, balls[0], balls[-1])
            seq = [run[0]] if run[0] >= self.n_balls else []
            seq += balls
            if run[-1] >= self.n_balls:
                seq.append(run[-1])
            verts.extend(c[b].copy() for b in seq)
            k = e
        poly = np.array(verts)
        keep = np.ones(len(poly), dtype=bool)
        keep[1:] = np.any(np.diff(poly, axis=0) != 0, axis=1)
        return poly[keep]


def _center_hops(cs: ClusterSet, a: int, b: int) -> list[int]:
    """Shortest (Euclidean) chain of overlapping member balls from ball a to ball b."""
    if a == b:
        return [a]
    mem = cs.members(int(cs.labels[a]))
    pts = cs.config.centers[mem]
    dd = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    # coincident centers would read as missing edges
    adj = np.where(dd <= 2 * cs.radius, np.maximum(dd, 1e-300), 0.0)
    np.fill_diagonal(adj, 0.0)
    ia = int(np.nonzero(mem == a)[0][0])
    ib = int(np.nonzero(mem == b)[0][0])
    _, pr = csgraph_dijkstra(csr_matrix(adj), indices=ia, return_predecessors=True)
    seq = [ib]
    while seq[-1] != ia:
        seq.append(int(pr[seq[-1]]))
    return [int(mem[s]) for s in seq[::-1]]


def _ensure_clusters(config: PointConfiguration, cs: ClusterSet | None) -> ClusterSet:
    return cs if cs is not None else find_clusters(config)


def _visited(cs: ClusterSet, chain) -> list[int]:
    out = []
    for b in chain:
        if b < len(cs.labels):
            cid = int(cs.labels[b])
            if not out or out[-1] != cid:
                out.append(cid)
    return out


def _xi0(config, cs, x, y, geodesic: bool, max_gap: float = math.inf,
         active=None) -> DistanceResult:
    x = as_point(x, config.d)
    y = as_point(y, config.d)
    g = BallGraph(config, np.stack([x, y]), active=active)
    src, tgt = g.point(0), g.point(1)
    dist, pred, _ = g.search(src, [tgt], max_gap=max_gap)
    if geodesic:
        cs = _ensure_clusters(config, cs)
        poly = g.polyline(pred, tgt, cs)
        visited = _visited(cs, g.chain(pred, tgt))
    else:
        poly = np.stack([x, y])
        visited = _visited(cs, g.chain(pred, tgt)) if cs is not None else []
    return DistanceResult(float(dist[tgt]), poly, visited, exact=math.isinf(max_gap))


def distance_xi0(config: PointConfiguration, cs: ClusterSet | None, x, y,
                 max_gap: float = math.inf) -> DistanceResult:
    """Exact ``dist(x, y)`` for xi = 0.

    ``max_gap`` drops longer free edges for very large searches; a finite cap
    makes the value an upper bound and clears the ``exact`` flag.
    """
    return _xi0(config, cs, x, y, geodesic=False, max_gap=max_gap)


def geodesic_xi0(config: PointConfiguration, cs: ClusterSet | None, x, y) -> DistanceResult:
    return _xi0(config, cs, x, y, geodesic=True)


def free_length(config: PointConfiguration, polyline) -> float:
    """Length of the parts of a polyline lying outside every ball."""
    poly = np.asarray(polyline, dtype=float)
    if len(poly) < 2:
        return 0.0
    return float(np.sum(segment_cost(config, 0.0, poly[:-1], poly[1:])))


def distance_to_hyperplane(config: PointConfiguration, cs: ClusterSet | None, x,
                           axis: int, level: float, max_gap: float = math.inf) -> float:
    """xi = 0 distance from ``x`` to ``{p : p[axis] = level}``."""
    x = as_point(x, config.d)
    if not 0 <= axis < config.d:
        raise InvalidParameter(f"axis {axis} out of range")
    g = BallGraph(config, x[None, :])
    dist, *_ = g.search(g.point(0), plane=(axis, level), max_gap=max_gap)
    return float(dist[-1])


def distances_between(config: PointConfiguration, points, active=None,
                      max_gap: float = math.inf) -> np.ndarray:
    """Symmetric matrix of xi = 0 distances between all ``points``."""
    pts = np.asarray(points, dtype=float).reshape(-1, config.d)
    m = pts.shape[0]
    g = BallGraph(config, pts, active=active)
    out = np.zeros((m, m))
    for a in range(m - 1):
        tg = [g.point(b) for b in range(a + 1, m)]
        dist, *_ = g.search(g.point(a), tg, max_gap=max_gap)
        out[a, a + 1:] = dist[tg]
        out[a + 1:, a] = dist[tg]
    return out


# ---------------------------------------------------------------------------
# xi > 0


def _inside_lengths(a, b, centers, radius, tree=None):
    """Length of each segment [a_k, b_k] covered by the union of the balls.

    Chords of the candidate balls are merged per segment: sort by entry
    parameter, then a running max of exit parameters gives the union length.
    """
    m = a.shape[0]
    v = b - a
    L = np.linalg.norm(v, axis=1)
    if centers.shape[0] == 0 or m == 0:
        return np.zeros(m)
    if tree is None:
        tree = cKDTree(centers)
    lists = tree.query_ball_point((a + b) / 2, L / 2 + radius * (1 + 1e-12))
    lens = np.fromiter((len(q) for q in lists), dtype=np.int64, count=m)
    seg = np.repeat(np.arange(m), lens)
    if seg.size == 0:
        return np.zeros(m)
    ball = np.fromiter((j for q in lists for j in q), dtype=np.int64, count=seg.size)
    vs = v[seg]
    L2 = L[seg] ** 2
    w = a[seg] - centers[ball]
    B = (w * vs).sum(1)
    C = (w * w).sum(1) - radius * radius
    disc = B * B - L2 * C
    hit = (disc > 0) & (L2 > 0)
    seg, B, L2, disc = seg[hit], B[hit], L2[hit], disc[hit]
    root = np.sqrt(disc)
    t0 = np.clip((-B - root) / L2, 0.0, 1.0)
    t1 = np.clip((-B + root) / L2, 0.0, 1.0)
    # offsets of 2 per segment let one global running max serve every segment
    order = np.lexsort((t0, seg))
    seg = seg[order]
    s0 = t0[order] + 2.0 * seg
    s1 = t1[order] + 2.0 * seg
    reach = np.maximum.accumulate(s1)
    prev = np.empty_like(reach)
    prev[1:] = reach[:-1]
    first = np.ones(seg.size, dtype=bool)
    first[1:] = seg[1:] != seg[:-1]
    prev[first] = 2.0 * seg[first]
    covered = np.maximum(0.0, s1 - np.maximum(s0, prev))
    return np.bincount(seg, weights=covered, minlength=m) * L


def segment_cost(config: PointConfiguration, xi: float, a, b, tree=None):
    """Conformal length of segment(s) [a, b]: ``|b - a| - (1 - xi) * |[a, b] ∩ S|``.

    Accepts single points or stacked (m, d) arrays; returns a float or an array.
    ``tree`` is an optional prebuilt cKDTree over the centers.
    """
    if not 0.0 <= xi <= 1.0:
        raise InvalidParameter("xi must lie in [0, 1)")
    A = np.asarray(a, dtype=float)
    B = np.asarray(b, dtype=float)
    single = A.ndim == 1
    A2 = A.reshape(-1, config.d)
    B2 = B.reshape(-1, config.d)
    length = np.linalg.norm(B2 - A2, axis=1)
    if tree is None and len(config):
        tree = cKDTree(config.centers)
    out = np.empty(A2.shape[0])
    chunk = 200_000
    for s in range(0, A2.shape[0], chunk):
        sl = slice(s, s + chunk)
        inside = _inside_lengths(A2[sl], B2[sl], config.centers, config.radius, tree)
        out[sl] = length[sl] - (1.0 - xi) * np.minimum(inside, length[sl])
    return float(out[0]) if single else out


_GOLDEN = (1 + 5 ** 0.5) / 2


def _van_der_corput(n: int, base: int) -> np.ndarray:
    out = np.zeros(n)
    for i in range(n):
        f, k, x = 1.0, i + 1, 0.0
        while k:
            f /= base
            x += f * (k % base)
            k //= base
        out[i] = x
    return out


def boundary_nodes(config: PointConfiguration, K: int) -> np.ndarray:
    """K points on each ball's boundary; the K-set is a prefix of the 2K-set.

    d = 2: equally spaced angles ``2 pi k / K`` (the 2K angles contain them).
    d >= 3: a fixed low-discrepancy sequence on the sphere, truncated at K.
    """
    d, r = config.d, config.radius
    if d == 2:
        ang = 2 * np.pi * np.arange(K) / K
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif d == 3:
        z = 1 - 2 * _van_der_corput(K, 2)
        phi = 2 * np.pi * _van_der_corput(K, 3)
        rho = np.sqrt(np.maximum(0.0, 1 - z * z))
        dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    else:
        raise InvalidParameter("boundary nodes implemented for d = 2, 3")
    return (config.centers[:, None, :] + r * dirs[None, :, :]).reshape(-1, d)


def _graph_xi(config, xi, nodes, src, dst, max_edge, valid=None):
    n = nodes.shape[0]
    if math.isinf(max_edge):
        ii, jj = np.triu_indices(n, 1)
    else:
        pairs = cKDTree(nodes).query_pairs(max_edge, output_type="ndarray")
        ii, jj = pairs[:, 0], pairs[:, 1]
        # the direct source-target edge keeps the result below |x - y|
        ii = np.append(ii, src)
        jj = np.append(jj, dst)
    w = segment_cost(config, xi, nodes[ii], nodes[jj]) if ii.size else np.zeros(0)
    w = np.atleast_1d(w)
    if valid is not None:
        ok = np.array([valid(nodes[i], nodes[j]) for i, j in zip(ii, jj)], dtype=bool)
        ii, jj, w = ii[ok], jj[ok], w[ok]
    # csgraph drops explicit zeros; tiny positive stand-ins keep those edges
    w = np.where(w > 0, w, 1e-300)
    mat = csr_matrix((np.concatenate([w, w]), (np.concatenate([ii, jj]), np.concatenate([jj, ii]))),
                     shape=(n, n))
    dist, pred = csgraph_dijkstra(mat, indices=src, return_predecessors=True)
    path = [dst]
    while path[-1] != src and pred[path[-1]] >= 0:
        path.append(int(pred[path[-1]]))
    return float(dist[dst]), nodes[path[::-1]]


def distance_graph_xi(config: PointConfiguration, cs: ClusterSet | None, xi: float, x, y,
                      K: int, max_edge: float = math.inf) -> DistanceResult:
    """Upper bound on the xi-metric distance, nonincreasing under K -> 2K refinement.

    Nodes are x, y and K boundary points per ball; every pair of nodes closer
    than ``max_edge`` is joined with its exact conformal segment cost.
    """
    if K < 4:
        raise InvalidParameter("K must be at least 4")
    if not 0.0 <= xi < 1.0:
        raise InvalidParameter("xi must lie in [0, 1)")
    x = as_point(x, config.d)
    y = as_point(y, config.d)
    nodes = np.vstack([x, y, boundary_nodes(config, K)]) if len(config) else np.vstack([x, y])
    value, path = _graph_xi(config, xi, nodes, 0, 1, max_edge)
    return DistanceResult(value, path, [], exact=False, refinement=int(K))


def intrinsic_mask(config: PointConfiguration, cs: ClusterSet, domain: Domain):
    """Balls usable inside ``domain`` and whether any of them pokes out of it.

    A ball is usable when every center of its cluster lies in the domain.
    """
    if len(config) == 0:
        return np.zeros(0, dtype=bool), False
    r = config.radius
    inside = np.asarray(domain.contains(config.centers), dtype=bool)
    bad = np.zeros(cs.n_clusters, dtype=bool)
    np.logical_or.at(bad, cs.labels, ~inside)
    active = ~bad[cs.labels]
    if domain.kind == "polytope":
        ball_in = np.all(config.centers @ domain.A.T + r * np.linalg.norm(domain.A, axis=1)
                         <= domain.b, axis=1)
    elif domain.kind == "union":
        offs = np.eye(config.d) * r
        probe = [config.centers + sg * o for o in offs for sg in (1, -1)]
        ball_in = np.all([domain.contains(p) for p in probe], axis=0)
    else:
        bb = domain.bounding_box()
        ball_in = np.all((config.centers >= bb.lo + r) & (config.centers <= bb.hi - r), axis=1)
    return active, bool(np.any(active & ~ball_in))


def active_clusters(cs: ClusterSet, active_balls) -> np.ndarray:
    out = np.zeros(cs.n_clusters, dtype=bool)
    out[cs.labels[active_balls]] = True
    return out


def distance_intrinsic(config: PointConfiguration, cs: ClusterSet | None, domain: Domain,
                       x, y, xi: float = 0.0, K: int = 16) -> DistanceResult:
    """Distance using only paths inside ``domain``.

    Clusters count only if all their member centers lie in the domain; the
    result is flagged ``approximate`` when any counted cluster pokes out of it.
    For unions of boxes the inward corners join the node set so free travel
    can bend around notches.
    """
    x = as_point(x, config.d)
    y = as_point(y, config.d)
    if not (domain.contains(x) and domain.contains(y)):
        raise InvalidParameter("both endpoints must lie in the domain")
    cs = _ensure_clusters(config, cs)
    active, pokes = intrinsic_mask(config, cs, domain)
    r = config.radius

    if xi == 0.0 and domain.is_convex:
        res = _xi0(config, cs, x, y, geodesic=True, active=active)
        res.approximate = pokes
        return res

    corners = domain.reflex_corners()
    if xi == 0.0:
        value, poly = _intrinsic_xi0_small(config, cs, domain, x, y, active_clusters(cs, active),
                                           corners)
        return DistanceResult(value, poly, [], exact=not pokes, approximate=pokes)
    if K < 4:
        raise InvalidParameter("K must be at least 4")
    sub = PointConfiguration(config.centers[active].reshape(-1, config.d), r)
    bn = boundary_nodes(sub, K) if len(sub) else np.zeros((0, config.d))
    bn = bn[domain.contains(bn)] if len(bn) else bn
    nodes = np.vstack([x, y, corners, bn])
    value, path = _graph_xi(sub, xi, nodes, 0, 1, math.inf,
                            valid=None if domain.is_convex else domain.segment_inside)
    return DistanceResult(value, path, [], exact=False, refinement=int(K), approximate=pokes)


def _intrinsic_xi0_small(config, cs, domain, x, y, active, corners):
    """Dense xi = 0 search for non-convex domains: every ball pair is a candidate edge."""
    pts = np.vstack([x, y, corners])
    groups = [[i] for i in range(len(pts))]
    radii = [0.0] * len(pts)
    centers = list(pts)
    for cid in np.nonzero(active)[0]:
        mem = cs.members(int(cid))
        groups.append(list(range(len(centers), len(centers) + len(mem))))
        centers.extend(config.centers[mem])
        radii.extend([config.radius] * len(mem))
    centers = np.array(centers)
    radii = np.array(radii)
    n = len(groups)
    W = np.full((n, n), np.inf)
    link = {}
    for a in range(n):
        for b in range(a + 1, n):
            best = np.inf
            for i in groups[a]:
                for j in groups[b]:
                    v = centers[j] - centers[i]
                    L = float(np.linalg.norm(v))
                    g = max(0.0, L - radii[i] - radii[j])
                    if g >= best:
                        continue
                    if L > 0 and g > 0:
                        p, q = centers[i] + radii[i] * v / L, centers[j] - radii[j] * v / L
                    else:
                        p = q = centers[i] if radii[i] == 0 else centers[j]
                    if domain.segment_inside(p, q):
                        best = g
                        link[(a, b)] = (p, q)
            W[a, b] = W[b, a] = best
    finite = np.isfinite(W)
    mat = csr_matrix(np.where(finite, np.where(W > 0, W, 1e-300), 0.0))
    dist, pred = csgraph_dijkstra(mat, indices=0, return_predecessors=True)
    chain = [1]
    while chain[-1] != 0 and pred[chain[-1]] >= 0:
        chain.append(int(pred[chain[-1]]))
    chain = chain[::-1]
    verts = [x]
    for a, b in zip(chain[:-1], chain[1:]):
        p, q = link[(min(a, b), max(a, b))]
        if a > b:
            p, q = q, p
        verts.extend([p, q])
    verts.append(y)
    return float(dist[1]), np.array(verts)
