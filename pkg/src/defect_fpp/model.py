"""Core domain types: parameters, configurations, domains and intensity fields.

Geometry lives in rescaled coordinates (unit-radius balls, intensity ``u``)
unless stated otherwise; ``SimParams.R`` converts between the two pictures.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection


class InvalidParameter(ValueError):
    """Raised when an argument violates an operation's precondition."""


class OutOfDomain(ValueError):
    """Raised when a query point lies outside the region a field or domain covers."""


class NotFound(KeyError):
    """Raised for unknown cluster ids."""


class InsufficientData(RuntimeError):
    """Raised when an estimator has too little data to produce a result."""


#: Conservative default thresholds, just below the critical intensities of
#: unit balls (about 0.359 in 2D and 0.0816 in 3D).
DEFAULT_U_STAR = {2: 0.35, 3: 0.08}


def kappa(d: int) -> float:
    """Volume of the ``d``-dimensional Euclidean unit ball."""
    if int(d) != d or d < 1:
        raise InvalidParameter(f"dimension must be an integer >= 1, got {d!r}")
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def default_u_star(d: int) -> float:
    try:
        return DEFAULT_U_STAR[d]
    except KeyError:
        raise InvalidParameter(f"no default u* for d={d}; pass u_star explicitly") from None


@dataclass(frozen=True)
class SimParams:
    d: int = 2
    xi: float = 0.0
    R: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidParameter(f"d must be an integer >= 2, got {self.d!r}")
        if not 0.0 <= self.xi < 1.0:
            raise InvalidParameter(f"xi must lie in [0, 1), got {self.xi!r}")
        if not self.R > 0:
            raise InvalidParameter(f"R must be positive, got {self.R!r}")

    def to_rescaled(self, x):
        return np.asarray(x, dtype=float) * self.R

    def to_unscaled(self, z):
        return np.asarray(z, dtype=float) / self.R


def as_point(p, d: int | None = None) -> np.ndarray:
    arr = np.asarray(p, dtype=float).reshape(-1)
    if d is not None and arr.shape[0] != d:
        raise InvalidParameter(f"expected a point of dimension {d}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter("point coordinates must be finite")
    return arr


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointConfiguration:
    """A finite realization of defect-ball centers sharing one radius."""

    centers: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim == 1:
            c = c.reshape(0, 2) if c.size == 0 else c.reshape(1, -1)
        if c.ndim != 2:
            raise InvalidParameter("centers must be an (n, d) array")
        if not np.all(np.isfinite(c)):
            raise InvalidParameter("centers must be finite")
        if not self.radius > 0:
            raise InvalidParameter("radius must be positive")
        object.__setattr__(self, "centers", _frozen(c))

    @classmethod
    def empty(cls, d: int, radius: float = 1.0) -> PointConfiguration:
        return cls(np.zeros((0, d)), radius)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def __len__(self) -> int:
        return self.centers.shape[0]

    def with_ball(self, center) -> PointConfiguration:
        c = as_point(center, self.d)
        return PointConfiguration(np.vstack([self.centers, c[None, :]]), self.radius)

    def scaled(self, factor: float) -> PointConfiguration:
        """Multiply every coordinate and the radius by ``factor``."""
        return PointConfiguration(self.centers * factor, self.radius * factor)


@dataclass(frozen=True)
class MarkedConfiguration:
    """Centers with uniform marks in ``[0, u_max)``; restricting at level u gives the u-process."""

    centers: np.ndarray
    marks: np.ndarray
    u_max: float
    radius: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        m = np.asarray(self.marks, dtype=float).reshape(-1)
        if c.ndim != 2 or c.shape[0] != m.shape[0]:
            raise InvalidParameter("centers and marks must have matching lengths")
        if np.any(m < 0):
            raise InvalidParameter("marks must be nonnegative")
        object.__setattr__(self, "centers", _frozen(c))
        object.__setattr__(self, "marks", _frozen(m))

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def __len__(self) -> int:
        return self.centers.shape[0]


# ---------------------------------------------------------------------------
# Domains


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise InvalidParameter("box needs lo < hi in every coordinate")
        object.__setattr__(self, "lo", _frozen(lo))
        object.__setattr__(self, "hi", _frozen(hi))

    @classmethod
    def from_bounds(cls, bounds) -> Box:
        b = np.asarray(bounds, dtype=float)
        return cls(b[:, 0], b[:, 1])

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def sides(self) -> np.ndarray:
        return self.hi - self.lo

    def enlarged(self, margin: float) -> Box:
        return Box(self.lo - margin, self.hi + margin)

    def scaled(self, factor: float) -> Box:
        return Box(self.lo * factor, self.hi * factor)

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))


@dataclass(frozen=True)
class Domain:
    """A closed bounded region: a box, a convex polytope, or a union of boxes.

    Use the ``box``, ``polytope`` and ``union`` constructors rather than
    building instances by hand.
    """

    kind: str
    boxes: tuple[Box, ...] = ()
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    vertices: np.ndarray | None = field(default=None, repr=False)
    diameter: float = 0.0

    @classmethod
    def box(cls, bounds) -> Domain:
        bx = Box.from_bounds(bounds)
        return cls("box", boxes=(bx,), diameter=float(np.linalg.norm(bx.sides)))

    @classmethod
    def union(cls, boxes: Sequence) -> Domain:
        bxs = tuple(b if isinstance(b, Box) else Box.from_bounds(b) for b in boxes)
        if not bxs:
            raise InvalidParameter("union needs at least one box")
        if len({b.d for b in bxs}) != 1:
            raise InvalidParameter("all boxes must share a dimension")
        corners = np.vstack([b.corners() for b in bxs])
        diff = corners[:, None, :] - corners[None, :, :]
        diam = float(np.sqrt((diff**2).sum(-1)).max())
        kind = "box" if len(bxs) == 1 else "union"
        return cls(kind, boxes=bxs, diameter=diam)

    @classmethod
    def polytope(cls, A, b) -> Domain:
        """Convex polytope ``{x : A x <= b}``; must be bounded with nonempty interior."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[0] != b.shape[0]:
            raise InvalidParameter("polytope needs A of shape (m, d) and b of shape (m,)")
        d = A.shape[1]
        norms = np.linalg.norm(A, axis=1)
        # Chebyshev center: maximise t subject to A x + t |a_i| <= b.
        c = np.zeros(d + 1)
        c[-1] = -1.0
        res = linprog(c, A_ub=np.hstack([A, norms[:, None]]), b_ub=b,
                      bounds=[(None, None)] * d + [(0, None)])
        if res.status == 3:
            raise InvalidParameter("polytope is unbounded")
        if res.status != 0 or res.x[-1] <= 1e-12:
            raise InvalidParameter("polytope has empty interior")
        hs = HalfspaceIntersection(np.hstack([A, -b[:, None]]), res.x[:d])
        verts = hs.intersections
        diff = verts[:, None, :] - verts[None, :, :]
        diam = float(np.sqrt((diff**2).sum(-1)).max())
        return cls("polytope", A=_frozen(A), b=_frozen(b), vertices=_frozen(verts), diameter=diam)

    @property
    def d(self) -> int:
        return self.A.shape[1] if self.kind == "polytope" else self.boxes[0].d

    def scaled(self, factor: float) -> Domain:
        """The image of the domain under ``x -> factor * x``."""
        if self.kind == "polytope":
            return Domain.polytope(self.A, self.b * factor)
        return Domain.union([b.scaled(factor) for b in self.boxes])

    @property
    def is_convex(self) -> bool:
        return self.kind in ("box", "polytope")

    def bounding_box(self) -> Box:
        if self.kind == "polytope":
            return Box(self.vertices.min(0), self.vertices.max(0))
        return Box(np.min([b.lo for b in self.boxes], 0), np.max([b.hi for b in self.boxes], 0))

    def contains(self, p) -> np.ndarray | bool:
        pts = np.asarray(p, dtype=float)
        if pts.shape[-1] != self.d:
            raise InvalidParameter(f"point dimension {pts.shape[-1]} != domain dimension {self.d}")
        if self.kind == "polytope":
            out = np.all(pts @ self.A.T <= self.b, axis=-1)
        else:
            out = np.zeros(pts.shape[:-1], dtype=bool)
            for bx in self.boxes:
                out |= bx.contains(pts)
        return bool(out) if out.ndim == 0 else out

    @property
    def volume(self) -> float:
        if self.kind == "box":
            return self.boxes[0].volume
        if self.kind == "union":
            # Coordinate compression: exact for axis-aligned boxes.
            edges = [np.unique(np.concatenate([[b.lo[k], b.hi[k]] for b in self.boxes]))
                     for k in range(self.d)]
            mids = np.meshgrid(*[(e[1:] + e[:-1]) / 2 for e in edges], indexing="ij")
            vols = np.ones_like(mids[0])
            for k, e in enumerate(edges):
                shape = [1] * self.d
                shape[k] = -1
                vols = vols * np.diff(e).reshape(shape)
            inside = self.contains(np.stack([m.ravel() for m in mids], axis=1))
            return float(vols.ravel()[inside].sum())
        from scipy.spatial import ConvexHull

        return float(ConvexHull(self.vertices).volume)

    def segment_inside(self, a, b, samples: int = 0) -> bool:
        """Whether the closed segment [a, b] lies in the domain.

        Exact for convex kinds and for unions of boxes (interval cover test).
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.is_convex:
            return bool(self.contains(a) and self.contains(b))
        v = b - a
        spans = []
        for bx in self.boxes:
            t0, t1 = 0.0, 1.0
            for k in range(self.d):
                if abs(v[k]) < 1e-300:
                    if a[k] < bx.lo[k] or a[k] > bx.hi[k]:
                        t0, t1 = 1.0, 0.0
                        break
                    continue
                s0 = (bx.lo[k] - a[k]) / v[k]
                s1 = (bx.hi[k] - a[k]) / v[k]
                if s0 > s1:
                    s0, s1 = s1, s0
                t0, t1 = max(t0, s0), min(t1, s1)
            if t0 <= t1:
                spans.append((t0, t1))
        spans.sort()
        reach = 0.0
        eps = 1e-12
        for s0, s1 in spans:
            if s0 > reach + eps:
                return False
            reach = max(reach, s1)
        return reach >= 1.0 - eps

    def reflex_corners(self) -> np.ndarray:
        """Corners where the union's boundary turns inward (bend points of shortest paths)."""
        if self.kind != "union":
            return np.zeros((0, self.d))
        # candidates: every point of the grid spanned by the box coordinates
        # (a notch corner need not be a corner of any single box)
        axes = [np.unique(np.concatenate([[b.lo[k], b.hi[k]] for b in self.boxes]))
                for k in range(self.d)]
        offs = np.array(list(itertools.product((-1e-7, 1e-7), repeat=self.d)))
        half = len(offs) // 2
        out = []
        for c in itertools.product(*axes):
            c = np.array(c)
            # reflex: on the boundary with more than half of the orthants inside
            inside = int(np.sum(self.contains(c + offs)))
            if half < inside < len(offs):
                out.append(c)
        if not out:
            return np.zeros((0, self.d))
        return np.unique(np.round(np.array(out), 12), axis=0)

    def to_json(self) -> dict:
        if self.kind == "box":
            bx = self.boxes[0]
            return {"box": np.stack([bx.lo, bx.hi], 1).tolist()}
        if self.kind == "union":
            return {"boxes": [np.stack([b.lo, b.hi], 1).tolist() for b in self.boxes]}
        return {"polytope": {"A": self.A.tolist(), "b": self.b.tolist()}}

    @classmethod
    def from_json(cls, doc: dict) -> Domain:
        if "box" in doc:
            return cls.box(doc["box"])
        if "boxes" in doc:
            return cls.union(doc["boxes"])
        if "polytope" in doc:
            return cls.polytope(doc["polytope"]["A"], doc["polytope"]["b"])
        raise InvalidParameter(f"unknown domain description: {sorted(doc)}")


def domain_contains(domain: Domain, p) -> bool:
    return domain.contains(np.asarray(p, dtype=float))


# ---------------------------------------------------------------------------
# Intensity fields


@dataclass(frozen=True)
class IntensityField:
    """Defect intensity u(x): a constant, or samples on a regular grid with multilinear interpolation.

    Construction checks ``sup_value < u_star``; pass ``allow_supercritical=True``
    to downgrade the rejection to a warning.
    """

    kind: str
    value: float = 0.0
    origin: np.ndarray | None = None
    spacing: np.ndarray | None = None
    values: np.ndarray | None = None
    u_star: float | None = None
    allow_supercritical: bool = False
    _interp: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "constant":
            if not self.value >= 0:
                raise InvalidParameter(f"intensity must be nonnegative, got {self.value}")
        elif self.kind == "grid":
            vals = np.asarray(self.values, dtype=float)
            origin = np.asarray(self.origin, dtype=float).reshape(-1)
            if vals.ndim != origin.shape[0]:
                raise InvalidParameter("grid values must have one axis per origin coordinate")
            if any(n < 2 for n in vals.shape):
                raise InvalidParameter("grid needs at least two samples per axis")
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise InvalidParameter("grid values must be finite and nonnegative")
            spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), origin.shape).copy()
            if np.any(spacing <= 0):
                raise InvalidParameter("grid spacing must be positive")
            axes = [origin[k] + spacing[k] * np.arange(vals.shape[k]) for k in range(vals.ndim)]
            object.__setattr__(self, "origin", _frozen(origin))
            object.__setattr__(self, "spacing", _frozen(spacing))
            object.__setattr__(self, "values", _frozen(vals))
            object.__setattr__(self, "_interp", RegularGridInterpolator(axes, vals, method="linear"))
        else:
            raise InvalidParameter(f"unknown intensity kind {self.kind!r}")
        if self.u_star is not None and self.sup_value >= self.u_star:
            msg = f"sup intensity {self.sup_value} >= u* = {self.u_star} (supercritical)"
            if not self.allow_supercritical:
                raise InvalidParameter(msg)
            warnings.warn(msg, stacklevel=3)

    @classmethod
    def constant(cls, value: float, u_star: float | None = None, **kw) -> IntensityField:
        return cls("constant", value=float(value), u_star=u_star, **kw)

    @classmethod
    def grid(cls, origin, spacing, values, u_star: float | None = None, **kw) -> IntensityField:
        return cls("grid", origin=origin, spacing=spacing, values=values, u_star=u_star, **kw)

    @classmethod
    def linear(cls, box: Box, axis: int, u_from: float, u_to: float, **kw) -> IntensityField:
        """Field varying linearly along ``axis`` across ``box`` (2 samples per axis)."""
        d = box.d
        vals = np.empty((2,) * d)
        idx = [slice(None)] * d
        idx[axis] = 0
        vals[tuple(idx)] = u_from
        idx[axis] = 1
        vals[tuple(idx)] = u_to
        return cls.grid(box.lo, box.sides, vals, **kw)

    @property
    def sup_value(self) -> float:
        return self.value if self.kind == "constant" else float(self.values.max())

    @property
    def inf_value(self) -> float:
        return self.value if self.kind == "constant" else float(self.values.min())

    @property
    def region(self) -> Box | None:
        if self.kind == "constant":
            return None
        return Box(self.origin, self.origin + self.spacing * (np.array(self.values.shape) - 1))

    @property
    def lipschitz_bound(self) -> float:
        """Upper bound on the Lipschitz constant of the interpolant (Euclidean norm)."""
        if self.kind == "constant":
            return 0.0
        total = 0.0
        for k in range(self.values.ndim):
            total += (np.abs(np.diff(self.values, axis=k)).max() / self.spacing[k]) ** 2
        return math.sqrt(total)

    def __call__(self, p) -> np.ndarray | float:
        return eval_intensity(self, p)

    def rescaled(self, R: float) -> IntensityField:
        """The same field expressed in coordinates multiplied by ``R``."""
        if self.kind == "constant":
            return self
        return IntensityField.grid(self.origin * R, self.spacing * R, self.values,
                                   u_star=self.u_star, allow_supercritical=self.allow_supercritical)

    def to_json(self) -> dict:
        if self.kind == "constant":
            return {"constant": self.value}
        sp = self.spacing
        return {"grid": {"origin": self.origin.tolist(),
                         "spacing": float(sp[0]) if np.all(sp == sp[0]) else sp.tolist(),
                         "values": self.values.tolist()}}

    @classmethod
    def from_json(cls, doc: dict, u_star: float | None = None, **kw) -> IntensityField:
        if "constant" in doc:
            return cls.constant(doc["constant"], u_star=u_star, **kw)
        if "grid" in doc:
            g = doc["grid"]
            return cls.grid(g["origin"], g["spacing"], g["values"], u_star=u_star, **kw)
        raise InvalidParameter(f"unknown intensity description: {sorted(doc)}")


def eval_intensity(fld: IntensityField, p) -> np.ndarray | float:
    pts = np.asarray(p, dtype=float)
    if fld.kind == "constant":
        return fld.value if pts.ndim <= 1 else np.full(pts.shape[:-1], fld.value)
    if pts.shape[-1] != fld.values.ndim:
        raise InvalidParameter("query dimension does not match the grid")
    region = fld.region
    flat = pts.reshape(-1, pts.shape[-1])
    tol = 1e-9 * (1 + np.abs(region.hi))
    if np.any(flat < region.lo - tol) or np.any(flat > region.hi + tol):
        raise OutOfDomain("intensity queried outside its grid")
    flat = np.clip(flat, region.lo, region.hi)
    out = fld._interp(flat)
    return float(out[0]) if pts.ndim <= 1 else out.reshape(pts.shape[:-1])


def load_setup(source, u_star: float | None = None, allow_supercritical: bool = False):
    """Read ``{"domain": ..., "intensity": ...}`` from a path, JSON string or dict."""
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        doc = json.loads(Path(source).read_text())
    else:
        doc = json.loads(source)
    domain = Domain.from_json(doc["domain"]) if "domain" in doc else None
    fld = None
    if "intensity" in doc:
        fld = IntensityField.from_json(doc["intensity"], u_star=u_star,
                                       allow_supercritical=allow_supercritical)
    return domain, fld
