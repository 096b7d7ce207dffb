"""Limit quantities: sigma, the eta upper bound, eta tables, and the conformal grid solver."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra as csgraph_dijkstra

from .model import Domain, InvalidParameter, OutOfDomain, as_point, kappa


def _check(u, xi, d):
    if d < 2:
        raise InvalidParameter(f"d must be >= 2, got {d}")
    if not 0.0 <= xi < 1.0:
        raise InvalidParameter(f"xi must lie in [0, 1), got {xi}")
    if np.any(np.asarray(u) < 0):
        raise InvalidParameter("u must be nonnegative")


def vacant_probability(u, d: int):
    return np.exp(-np.asarray(u, dtype=float) * kappa(d))


def sigma(u, xi: float, d: int):
    """Volume coefficient: ``(e^{-u k_d} + xi^d (1 - e^{-u k_d}))^(1/d)``."""
    _check(u, xi, d)
    p = vacant_probability(u, d)
    out = (p + xi**d * (1.0 - p)) ** (1.0 / d)
    return float(out) if np.ndim(out) == 0 else out


def eta_upper_bound(u, xi: float, d: int):
    """``e^{-u k_d} + xi (1 - e^{-u k_d})``; for xi = 0 this is ``sigma^d``."""
    _check(u, xi, d)
    p = vacant_probability(u, d)
    out = p + xi * (1.0 - p)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# eta tables


@dataclass
class EtaTable:
    d: int
    xi: float
    u: np.ndarray
    eta: np.ndarray
    stderr: np.ndarray
    R: float | None = None
    replicas: int | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        order = np.argsort(u)
        self.u = u[order]
        self.eta = np.asarray(self.eta, dtype=float)[order]
        self.stderr = np.broadcast_to(np.asarray(self.stderr, dtype=float), u.shape)[order].copy()
        if self.u.size == 0:
            raise InvalidParameter("empty eta table")
        if np.any(np.diff(self.u) <= 0):
            raise InvalidParameter("duplicate u values in eta table")

    def problems(self) -> list[str]:
        """Violations of the table invariants (empty when the table is valid)."""
        out = []
        if self.u[0] != 0.0 or self.eta[0] != 1.0:
            out.append("missing entry eta(0) = 1")
        if np.any(self.u < 0):
            out.append("negative u")
        if np.any(self.eta <= 0) or np.any(self.eta > 1):
            out.append("eta values must lie in (0, 1]")
        for k in range(1, len(self.u)):
            slack = 2.0 * math.hypot(self.stderr[k - 1], self.stderr[k])
            if self.eta[k] > self.eta[k - 1] + slack:
                out.append(f"eta increases between u={self.u[k - 1]} and u={self.u[k]}")
        return out

    def to_json(self) -> dict:
        return {"d": int(self.d), "xi": float(self.xi),
                "entries": [{"u": float(a), "eta": float(b), "stderr": float(c)}
                            for a, b, c in zip(self.u, self.eta, self.stderr)],
                "R": self.R, "replicas": self.replicas}

    @classmethod
    def from_json(cls, doc) -> EtaTable:
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        try:
            ent = doc["entries"]
            return cls(int(doc["d"]), float(doc["xi"]), [e["u"] for e in ent],
                       [e["eta"] for e in ent], [e.get("stderr", 0.0) for e in ent],
                       doc.get("R"), doc.get("replicas"))
        except (KeyError, TypeError) as exc:
            raise InvalidParameter(f"malformed eta table: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def merge_tables(tables: list[EtaTable]) -> EtaTable:
    """Union of entries; repeated u values are pooled by inverse-variance weights."""
    if not tables:
        raise InvalidParameter("nothing to merge")
    d, xi = tables[0].d, tables[0].xi
    if any(t.d != d or t.xi != xi for t in tables):
        raise InvalidParameter("tables disagree on d or xi")
    pool: dict[float, list[tuple[float, float]]] = {}
    for t in tables:
        for a, b, c in zip(t.u, t.eta, t.stderr):
            pool.setdefault(float(a), []).append((float(b), float(c)))
    us = sorted(pool)
    etas, ses = [], []
    for a in us:
        vals = pool[a]
        exact = [b for b, c in vals if c == 0.0]
        if exact:
            etas.append(exact[0])
            ses.append(0.0)
            continue
        w = [1.0 / c**2 for _, c in vals]
        etas.append(math.fsum(wi * b for wi, (b, _) in zip(w, vals)) / math.fsum(w))
        ses.append(1.0 / math.sqrt(math.fsum(w)))
    Rs = {t.R for t in tables}
    reps = [t.replicas for t in tables if t.replicas is not None]
    return EtaTable(d, xi, us, etas, ses, Rs.pop() if len(Rs) == 1 else None,
                    sum(reps) if reps else None)


def eta_lookup(table: EtaTable, u):
    """Piecewise-linear interpolation in the table, clamped to ``[min eta, 1]``."""
    arr = np.asarray(u, dtype=float)
    tol = 1e-12
    if np.any(arr < table.u[0] - tol) or np.any(arr > table.u[-1] + tol):
        raise OutOfDomain(f"u outside table range [{table.u[0]}, {table.u[-1]}]")
    out = np.clip(np.interp(arr, table.u, table.eta), table.eta.min(), 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# conformal grid solver


def stencil(d: int, order: int) -> np.ndarray:
    """Half of the primitive integer steps with entries in ``[-order, order]``.

    order 2 in d = 2 is the 16-neighbour stencil; order 1 in d = 3 is the 26-neighbour one.
    """
    out = []
    for v in itertools.product(range(-order, order + 1), repeat=d):
        if not any(v) or math.gcd(*map(abs, v)) != 1:
            continue
        first = next(c for c in v if c != 0)
        if first > 0:
            out.append(v)
    return np.array(out, dtype=np.int64)


def stencil_anisotropy(order: int, samples: int = 20001) -> float:
    """Worst relative overestimate of Euclidean length by the d = 2 stencil metric."""
    steps = stencil(2, order).astype(float)
    steps = np.vstack([steps, -steps])
    ang = np.sort(np.arctan2(steps[:, 1], steps[:, 0]))
    ang = np.append(ang, ang[0] + 2 * np.pi)
    worst = 0.0
    for a0, a1 in zip(ang[:-1], ang[1:]):
        theta = np.linspace(a0, a1, max(3, samples // len(steps)))
        span = a1 - a0
        # direction theta split into the two bounding step directions
        b = np.sin(theta - a0) / np.sin(span)
        a = np.sin(a1 - theta) / np.sin(span)
        worst = max(worst, float((a + b).max()) - 1.0)
    return worst


def default_order(d: int) -> int:
    return 2 if d == 2 else 1


@dataclass
class ConformalGrid:
    """Lattice of spacing ``h`` over a domain carrying a conformal factor rho > 0.

    ``rho`` is a callable on ``(n, d)`` point arrays or a positive constant.
    Distances come from Dijkstra over the lattice with a wide stencil; an edge
    costs its Euclidean length times the mean of rho at its two ends.
    """

    domain: Domain
    h: float
    rho: Callable | float = 1.0
    order: int | None = None
    nodes: np.ndarray = field(init=False, repr=False)
    rho_nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidParameter("grid spacing must be positive")
        d = self.domain.d
        if self.order is None:
            self.order = default_order(d)
        bb = self.domain.bounding_box()
        self.shape = tuple(int(math.floor(s / self.h + 1e-9)) + 1 for s in bb.sides)
        self.lo = bb.lo
        axes = [self.lo[k] + self.h * np.arange(self.shape[k]) for k in range(d)]
        pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        inside = np.asarray(self.domain.contains(pts), dtype=bool)
        self.index = np.full(len(pts), -1, dtype=np.int64)
        self.index[inside] = np.arange(inside.sum())
        self.nodes = pts[inside]
        self.rho_nodes = self._rho(self.nodes)
        if np.any(self.rho_nodes <= 0) or not np.all(np.isfinite(self.rho_nodes)):
            raise InvalidParameter("rho must be positive and finite")
        self._matrix = self._build()

    def _rho(self, pts) -> np.ndarray:
        if callable(self.rho):
            return np.broadcast_to(np.asarray(self.rho(pts), dtype=float), (len(pts),)).copy()
        return np.full(len(pts), float(self.rho))

    def _segments_inside(self, a, b) -> np.ndarray:
        if self.domain.is_convex:
            return np.ones(len(a), dtype=bool)
        ok = np.ones(len(a), dtype=bool)
        for t in np.linspace(0.0, 1.0, 2 * self.order + 3)[1:-1]:
            ok &= np.asarray(self.domain.contains(a + t * (b - a)), dtype=bool)
        return ok

    def _build(self) -> csr_matrix:
        d = self.domain.d
        shape = np.array(self.shape)
        grid_idx = np.stack(np.unravel_index(np.nonzero(self.index >= 0)[0], self.shape), axis=1)
        rows, cols, w = [], [], []
        for step in stencil(d, self.order):
            tgt = grid_idx + step
            ok = np.all((tgt >= 0) & (tgt < shape), axis=1)
            src = np.nonzero(ok)[0]
            flat = np.ravel_multi_index(tgt[ok].T, self.shape)
            dst = self.index[flat]
            keep = dst >= 0
            src, dst = src[keep], dst[keep]
            keep = self._segments_inside(self.nodes[src], self.nodes[dst])
            src, dst = src[keep], dst[keep]
            length = self.h * float(np.linalg.norm(step))
            rows.append(src)
            cols.append(dst)
            w.append(length * 0.5 * (self.rho_nodes[src] + self.rho_nodes[dst]))
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        ww = np.concatenate(w)
        n = len(self.nodes)
        return coo_matrix((np.concatenate([ww, ww]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                          shape=(n, n)).tocsr()

    def _locate(self, p) -> int:
        """Lattice node at ``p`` or -1 when ``p`` is off the lattice."""
        rel = (p - self.lo) / self.h
        k = np.rint(rel)
        if np.all(np.abs(rel - k) < 1e-9) and np.all(k >= 0) and np.all(k < self.shape):
            return int(self.index[np.ravel_multi_index(k.astype(np.int64), self.shape)])
        return -1

    def _attach(self, points) -> tuple[csr_matrix, np.ndarray]:
        """Graph augmented with off-lattice query points; returns node ids of the points."""
        n = len(self.nodes)
        ids = np.empty(len(points), dtype=np.int64)
        extra_r, extra_c, extra_w = [], [], []
        m = 0
        reach = self.h * self.order * math.sqrt(self.domain.d)
        for k, p in enumerate(points):
            node = self._locate(p)
            if node >= 0:
                ids[k] = node
                continue
            ids[k] = n + m
            near = np.nonzero(np.linalg.norm(self.nodes - p, axis=1) <= reach)[0]
            seg_ok = self._segments_inside(np.repeat(p[None, :], len(near), 0), self.nodes[near])
            near = near[seg_ok]
            if near.size == 0:
                raise InvalidParameter(f"point {p.tolist()} is not connected to the lattice")
            rp = self._rho(p[None, :])[0]
            w = np.linalg.norm(self.nodes[near] - p, axis=1) * 0.5 * (rp + self.rho_nodes[near])
            extra_r.append(np.full(near.size, n + m))
            extra_c.append(near)
            extra_w.append(np.maximum(w, 1e-300))
            m += 1
        if m == 0:
            return self._matrix, ids
        r = np.concatenate(extra_r)
        c = np.concatenate(extra_c)
        w = np.concatenate(extra_w)
        base = self._matrix.tocoo()
        full = coo_matrix((np.concatenate([base.data, w, w]),
                           (np.concatenate([base.row, r, c]), np.concatenate([base.col, c, r]))),
                          shape=(n + m, n + m))
        return full.tocsr(), ids

    def _points(self, pts) -> np.ndarray:
        arr = np.asarray(pts, dtype=float).reshape(-1, self.domain.d)
        inside = np.asarray(self.domain.contains(arr), dtype=bool).reshape(-1)
        if not np.all(inside):
            raise InvalidParameter("query points must lie in the domain")
        return arr

    def pairwise(self, points) -> np.ndarray:
        """Matrix of conformal distances between all ``points``."""
        pts = self._points(points)
        mat, ids = self._attach(pts)
        dist = csgraph_dijkstra(mat, indices=ids)
        out = dist[:, ids]
        out = 0.5 * (out + out.T)
        np.fill_diagonal(out, 0.0)
        return out


def conformal_distance(grid: ConformalGrid, x, y) -> float:
    d = grid.domain.d
    x = as_point(x, d)
    y = as_point(y, d)
    if np.array_equal(x, y):
        grid._points(x)
        return 0.0
    return float(grid.pairwise(np.stack([x, y]))[0, 1])
