"""Monte Carlo campaigns over the Boolean model.

Every campaign is a per-replica function ``(payload, k, stream) -> row`` plus a
summary over the rows.  :func:`run_replicas` drives them (sequentially or in
worker processes) and always returns rows in replica order, so results do not
depend on scheduling.  Replica ``k`` draws from ``rng.child(k)``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable

import numba
import numpy as np
from scipy.spatial import cKDTree

from . import _geometry
from .clusters import build_index, find_clusters
from .limits import (ConformalGrid, EtaTable, eta_lookup, eta_upper_bound, sigma,
                     vacant_probability)
from .metric import BallGraph, distance_graph_xi, distance_xi0, geodesic_xi0, intrinsic_mask
from .model import (Box, Domain, InsufficientData, IntensityField, InvalidParameter,
                    OutOfDomain, PointConfiguration, SimParams, default_u_star)
from .sampler import RngStream, restrict, sample_homogeneous, sample_inhomogeneous, sample_marked

SCHEMA = 1
PATHWISE_TOL = 1e-9
TABLE_STREAM = 1 << 40


class ConfigError(InvalidParameter):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class MonotonicityViolation(RuntimeError):
    """A coupled pair of samples broke the pathwise inequality (a bug, not noise)."""


class BudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Records


def _fsum_stats(values) -> tuple[float, float]:
    v = [float(x) for x in values]
    n = len(v)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(v) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((x - mean) ** 2 for x in v) / (n - 1)
    return mean, math.sqrt(var / n)


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats for JSON output."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _json_float(obj)
    return obj


@dataclass
class EstimateRecord:
    name: str
    params: dict
    n: int
    mean: float
    stderr: float
    quantiles: dict | None = None
    seed: int = 0
    per_replica: list | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, name: str, params: dict, values, seed: int,
                    keep_values: bool = True, **extra) -> EstimateRecord:
        vals = [float(x) for x in values]
        mean, se = _fsum_stats(vals)
        q = None
        if vals:
            q5, q50, q95 = np.quantile(np.array(vals), [0.05, 0.5, 0.95])
            q = {"q05": float(q5), "q50": float(q50), "q95": float(q95)}
        return cls(name, dict(params), len(vals), mean, se, q, int(seed),
                   vals if keep_values else None, dict(extra))

    def to_json(self) -> dict:
        return _plain({"schema": SCHEMA, "name": self.name, "params": self.params, "n": self.n,
                       "mean": self.mean, "stderr": self.stderr, "quantiles": self.quantiles,
                       "seed": self.seed, "per_replica": self.per_replica, "extra": self.extra})


@dataclass
class ExperimentResult:
    kind: str
    seed: int
    records: list[EstimateRecord]
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    completed: int = 0
    requested: int = 0
    stopped: str | None = None

    def record(self, name: str, **params) -> EstimateRecord:
        for r in self.records:
            if r.name == name and all(r.params.get(k) == v for k, v in params.items()):
                return r
        raise KeyError(f"no record {name} {params}")

    def to_json(self) -> dict:
        return _plain({"schema": SCHEMA, "kind": self.kind, "seed": self.seed,
                       "replicas_requested": self.requested, "replicas_completed": self.completed,
                       "stopped": self.stopped, "summary": self.summary,
                       "records": [r.to_json() for r in self.records]})


def csv_columns(rows: list[dict]) -> list[str]:
    """Scalar columns of replica rows; keys starting with ``_`` stay out of the CSV."""
    cols = ["replica"]
    for row in rows:
        for k in row:
            if not k.startswith("_") and k not in cols:
                cols.append(k)
    return cols


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    cols = csv_columns(rows)
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Replica driver


def run_replicas(fn: Callable, payload: dict, n: int, rng: RngStream, jobs: int = 1,
                 budget: float | None = None, on_row: Callable | None = None):
    """Run ``fn(payload, k, rng.child(k))`` for k < n.

    Returns ``(rows, stopped)`` with rows ordered by k.  With a ``budget`` in
    seconds, no replica is started once the elapsed time plus the mean replica
    time would exceed it, and ``payload["deadline"]`` lets a replica give up
    early by raising :class:`BudgetExceeded`; ``stopped`` then explains why.
    """
    start = time.time()
    payload = dict(payload)
    if budget is not None:
        payload["deadline"] = start + budget
    rows: dict[int, dict] = {}
    stopped = None
    if jobs <= 1:
        for k in range(n):
            if budget is not None and k > 0:
                used = time.time() - start
                if used + used / k > budget:
                    stopped = f"time budget {budget:g}s: next replica would overrun"
                    break
            try:
                row = fn(payload, k, rng.child(k))
            except BudgetExceeded as exc:
                stopped = str(exc)
                break
            row["replica"] = k
            rows[k] = row
            if on_row is not None:
                on_row(k, row)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = {ex.submit(fn, payload, k, rng.child(k)): k for k in range(n)}
            try:
                for fut in as_completed(futs):
                    k = futs[fut]
                    try:
                        row = fut.result()
                    except BudgetExceeded as exc:
                        stopped = str(exc)
                        continue
                    row["replica"] = k
                    rows[k] = row
                    if on_row is not None:
                        on_row(k, row)
                    if budget is not None and time.time() - start > budget and stopped is None:
                        stopped = f"time budget {budget:g}s exhausted"
                        for f in futs:
                            f.cancel()
            except BaseException:
                for f in futs:
                    f.cancel()
                raise
        if stopped is not None:
            # keep a gap-free prefix so partial results stay comparable across job counts
            done = 0
            while done in rows:
                done += 1
            rows = {k: rows[k] for k in range(done)}
    ordered = [dict(replica=k, **{c: v for c, v in rows[k].items() if c != "replica"})
               for k in sorted(rows)]
    return ordered, stopped


def _result(kind, rng, rows, stopped, requested, records, summary) -> ExperimentResult:
    return ExperimentResult(kind, rng.seed, records, rows, summary, len(rows), requested, stopped)


def _check_u(u: float, d: int, u_star: float | None, name: str = "u"):
    us = default_u_star(d) if u_star is None else u_star
    if not (isinstance(u, (int, float)) and math.isfinite(u) and u >= 0):
        raise ConfigError(name, f"intensity must be a finite number >= 0, got {u!r}")
    if u >= us:
        raise ConfigError(name, f"u = {u} is not below u* = {us} (supercritical)")


def _line_box(L: float, d: int, margin: float) -> Box:
    """Sampling window around the segment from 0 to ``L e_1``."""
    half = margin + L / 4.0
    return Box.from_bounds([[-margin, L + margin]] + [[-half, half]] * (d - 1))


def eta_margin(R: float) -> float:
    return 10.0 * math.log(1.0 + R)


# ---------------------------------------------------------------------------
# eta


def _eta_replica(p, k, stream):
    d, xi, u = p["d"], p["xi"], p["u"]
    row = {}
    for j, R in enumerate(p["R_list"]):
        m = p["margin"] if p["margin"] is not None else eta_margin(R)
        cfg = sample_homogeneous(u, _line_box(R, d, m), stream.child(j))
        x = np.zeros(d)
        y = np.zeros(d)
        y[0] = R
        if xi == 0.0:
            val = distance_xi0(cfg, None, x, y).value
        else:
            val = distance_graph_xi(cfg, None, xi, x, y, p["K"], p["max_edge"]).value
        row[f"dist_over_R_{R:g}"] = val / R
    return row


def estimate_eta(u: float, params: SimParams, R_list, replicas: int, rng: RngStream, *,
                 margin: float | None = None, K: int = 16, max_edge: float = 6.0,
                 u_star: float | None = None, jobs: int = 1, on_row=None) -> ExperimentResult:
    """Time constant: ``dist(0, R e_1) / R`` per replica and R.

    The estimate is the mean at the largest R; ``summary`` adds an ``a + b/R``
    fit, tail frequencies, the upper bound check and the gap to sigma(u).
    """
    d, xi = params.d, params.xi
    _check_u(u, d, u_star)
    R_list = sorted(float(r) for r in R_list)
    if not R_list or R_list[0] <= 0:
        raise ConfigError("R_list", "needs at least one positive R")
    if replicas < 1:
        raise ConfigError("replicas", "must be at least 1")
    payload = dict(d=d, xi=xi, u=float(u), R_list=R_list, margin=margin, K=K, max_edge=max_edge)
    rows, stopped = run_replicas(_eta_replica, payload, replicas, rng, jobs, on_row=on_row)
    records = []
    for R in R_list:
        vals = [r[f"dist_over_R_{R:g}"] for r in rows]
        records.append(EstimateRecord.from_values("eta", {"u": u, "R": R, "d": d, "xi": xi},
                                                  vals, rng.seed))
    summary = eta_summary(records, u, xi, d)
    return _result("eta", rng, rows, stopped, replicas, records, summary)


def eta_summary(records: list[EstimateRecord], u: float, xi: float, d: int) -> dict:
    last = records[-1]
    eta_hat, se = last.mean, last.stderr
    se0 = 0.0 if not math.isfinite(se) else se
    bound = float(eta_upper_bound(u, xi, d))
    sig = float(sigma(u, xi, d))
    out = {"u": u, "eta": eta_hat, "stderr": se, "R": last.params["R"], "bound": bound,
           "bound_violated": bool(eta_hat > bound + 3 * se0 + 1e-15),
           "sigma": sig, "sigma_gap": sig - eta_hat,
           "sigma_gap_significant": bool(sig - eta_hat > 3 * se0)}
    Rs = np.array([r.params["R"] for r in records])
    means = np.array([r.mean for r in records])
    if len(set(Rs.tolist())) >= 2:
        A = np.stack([np.ones_like(Rs), 1.0 / Rs], axis=1)
        (a, b), *_ = np.linalg.lstsq(A, means, rcond=None)
        out["fit"] = {"a": float(a), "b": float(b)}
    tails = {}
    for r in records:
        vals = np.array(r.per_replica)
        tails[f"{r.params['R']:g}"] = {f"{eps:g}": float(np.mean(np.abs(vals - eta_hat) > eps))
                                       for eps in (0.02, 0.05, 0.1)}
    out["tail_frequency"] = tails
    return out


def eta_table(u_values, params: SimParams, R: float, replicas: int, rng: RngStream,
              u_star: float | None = None, jobs: int = 1) -> EtaTable:
    """Estimate eta at each u (one stream per u) and collect them in a table."""
    us, etas, ses = [], [], []
    for i, u in enumerate(sorted(set(float(v) for v in u_values))):
        res = estimate_eta(u, params, [R], replicas, rng.child(i), u_star=u_star, jobs=jobs)
        us.append(u)
        etas.append(res.summary["eta"])
        se = res.summary["stderr"]
        ses.append(0.0 if not math.isfinite(se) else se)
    return EtaTable(params.d, params.xi, np.array(us), np.array(etas), np.array(ses), R, replicas)


# ---------------------------------------------------------------------------
# volume fraction


def stratified_probes(box: Box, n_target: int, gen: np.random.Generator) -> np.ndarray:
    """One uniform point in each cell of a k^d grid, k = round(n_target^(1/d))."""
    d = box.d
    k = max(1, int(round(n_target ** (1.0 / d))))
    idx = np.stack(np.meshgrid(*[np.arange(k)] * d, indexing="ij"), -1).reshape(-1, d)
    return box.lo + (idx + gen.random(idx.shape)) * (box.sides / k)


def _covered(centers: np.ndarray, radius: float, pts: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros(len(pts), dtype=bool)
    dist, _ = cKDTree(centers).query(pts, k=1)
    return dist <= radius


def _volume_replica(p, k, stream):
    d, xi, u, M = p["d"], p["xi"], p["u"], p["box_side"]
    box = Box.from_bounds([[0.0, M]] * d)
    cfg = sample_homogeneous(u, box.enlarged(1.0), stream.child(0))
    probes = stratified_probes(box, p["probes"], stream.child(1).generator())
    cov = _covered(cfg.centers, cfg.radius, probes)
    w = np.where(cov, xi ** d, 1.0)
    return {"fraction": math.fsum(w.tolist()) / len(w), "probes": len(w),
            "vacant": int((~cov).sum())}


def estimate_volume_fraction(u: float, params: SimParams, box_side: float, replicas: int,
                             rng: RngStream, probes: int = 100_000, u_star: float | None = None,
                             jobs: int = 1, on_row=None) -> ExperimentResult:
    """Weighted vacant fraction of ``[0, M]^d`` (weight 1 outside the balls, xi^d inside)."""
    d, xi = params.d, params.xi
    _check_u(u, d, u_star)
    if not box_side > 0:
        raise ConfigError("box_side", "must be positive")
    if probes < 1:
        raise ConfigError("probes", "must be at least 1")
    payload = dict(d=d, xi=xi, u=float(u), box_side=float(box_side), probes=int(probes))
    rows, stopped = run_replicas(_volume_replica, payload, replicas, rng, jobs, on_row=on_row)
    rec = EstimateRecord.from_values("volume_fraction", {"u": u, "M": box_side, "d": d, "xi": xi},
                                     [r["fraction"] for r in rows], rng.seed)
    target = float(sigma(u, xi, d)) ** d
    se = rec.stderr if math.isfinite(rec.stderr) else 0.0
    summary = {"target": target, "vacant_probability": float(vacant_probability(u, d)),
               "deviation": rec.mean - target, "within_3se": bool(abs(rec.mean - target) <= 3 * se)}
    return _result("volume", rng, rows, stopped, replicas, [rec], summary)


# ---------------------------------------------------------------------------
# geodesic deviation


def hausdorff_to_segment(poly: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Hausdorff distance between a polyline from x to y and the segment [x, y].

    Distance to a segment is convex along each polyline edge, so the
    polyline-to-segment side peaks at a vertex.  The other side never exceeds
    it: the polyline crosses every hyperplane orthogonal to [x, y] between the
    endpoints, at a point whose distance to the segment bounds that of the
    foot point.  The vertex maximum is therefore exact.
    """
    v = y - x
    L2 = float(v @ v)
    if L2 == 0:
        return float(np.max(np.linalg.norm(poly - x, axis=1)))
    t = np.clip((poly - x) @ v / L2, 0.0, 1.0)
    return float(np.max(np.linalg.norm(poly - (x + t[:, None] * v), axis=1)))


def _geodesic_replica(p, k, stream):
    d, u = p["d"], p["u"]
    row = {}
    for j, L in enumerate(p["lengths"]):
        cfg = sample_homogeneous(u, _line_box(L, d, eta_margin(L)), stream.child(j))
        x = np.zeros(d)
        y = np.zeros(d)
        y[0] = L
        res = geodesic_xi0(cfg, None, x, y)
        row[f"deviation_{L:g}"] = hausdorff_to_segment(res.geodesic, x, y) / L
    return row


def geodesic_deviation(u: float, params: SimParams, lengths, replicas: int, rng: RngStream,
                       u_star: float | None = None, jobs: int = 1,
                       on_row=None) -> ExperimentResult:
    """``d_H(geodesic, [0, L e_1]) / L`` per replica and length."""
    if params.xi != 0.0:
        raise ConfigError("xi", "geodesic deviation needs xi = 0")
    _check_u(u, params.d, u_star)
    lengths = sorted(float(L) for L in lengths)
    if not lengths or lengths[0] <= 0:
        raise ConfigError("lengths", "needs positive lengths")
    payload = dict(d=params.d, u=float(u), lengths=lengths)
    rows, stopped = run_replicas(_geodesic_replica, payload, replicas, rng, jobs, on_row=on_row)
    records = [EstimateRecord.from_values("geodesic_deviation", {"u": u, "L": L},
                                          [r[f"deviation_{L:g}"] for r in rows], rng.seed)
               for L in lengths]
    med = [r.quantiles["q50"] if r.quantiles else math.nan for r in records]
    summary = {"median": dict(zip([f"{L:g}" for L in lengths], med)),
               "q95": {f"{L:g}": (r.quantiles["q95"] if r.quantiles else math.nan)
                       for L, r in zip(lengths, records)},
               "median_strictly_decreasing": bool(all(a > b for a, b in zip(med, med[1:])))}
    return _result("geodesic", rng, rows, stopped, replicas, records, summary)


# ---------------------------------------------------------------------------
# cluster tail


def _tail_replica(p, k, stream):
    d, u, M = p["d"], p["u"], p["box_side"]
    cfg = sample_homogeneous(u, Box.from_bounds([[0.0, M]] * d), stream)
    cs = find_clusters(cfg)
    diam = cs.diameters()
    return {"clusters": int(cs.n_clusters),
            "max_diameter": float(diam.max()) if len(diam) else 0.0,
            "mean_diameter": float(np.mean(diam)) if len(diam) else math.nan,
            "_diameters": diam}


def survival_fit(diam: np.ndarray, band=(1e-3, 1e-1)) -> dict:
    """Least-squares line through ``log P(diam > t)`` where the survival lies in ``band``."""
    diam = np.sort(np.asarray(diam, dtype=float))
    n = len(diam)
    if n == 0:
        raise InsufficientData("no clusters")
    t, first = np.unique(diam, return_index=True)
    last = np.concatenate([first[1:], [n]])
    surv = (n - last) / n
    sel = (surv >= band[0]) & (surv <= band[1])
    if sel.sum() < 5:
        raise InsufficientData(f"only {int(sel.sum())} survival points in the fit band")
    x, y = t[sel], np.log(surv[sel])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return {"slope": float(slope), "intercept": float(icpt), "r2": r2, "points": int(sel.sum()),
            "t": t.tolist(), "survival": surv.tolist()}


def cluster_tail(u: float, params: SimParams, box_side: float, replicas: int, rng: RngStream,
                 band=(1e-3, 1e-1), u_star: float | None = None, jobs: int = 1,
                 on_row=None) -> ExperimentResult:
    """Pooled survival curve of cluster diameters with a log-linear tail fit.

    Raises :class:`InsufficientData` when fewer than 5 survival points fall in ``band``.
    """
    _check_u(u, params.d, u_star)
    payload = dict(d=params.d, u=float(u), box_side=float(box_side))
    rows, stopped = run_replicas(_tail_replica, payload, replicas, rng, jobs, on_row=on_row)
    pooled = np.concatenate([r["_diameters"] for r in rows]) if rows else np.zeros(0)
    fit = survival_fit(pooled, band)
    rec = EstimateRecord.from_values("mean_cluster_diameter", {"u": u, "M": box_side},
                                     [r["mean_diameter"] for r in rows], rng.seed)
    fit["clusters"] = int(len(pooled))
    return _result("cluster_tail", rng, rows, stopped, replicas, [rec], fit)


# ---------------------------------------------------------------------------
# threshold scan


@numba.njit(cache=True)
def _first_crossing(n, ev_t, ev_a, ev_b):
    """Activation level at which nodes n and n+1 (the two faces) become connected."""
    parent = np.arange(n + 2)
    for q in range(ev_t.shape[0]):
        a = ev_a[q]
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        b = ev_b[q]
        while parent[b] != b:
            parent[b] = parent[parent[b]]
            b = parent[b]
        if a != b:
            parent[a] = b
        x = n
        while parent[x] != x:
            x = parent[x]
        y = n + 1
        while parent[y] != y:
            y = parent[y]
        if x == y:
            return ev_t[q]
    return np.inf


def crossing_level(centers: np.ndarray, marks: np.ndarray, radius: float, side: float) -> float:
    """Smallest u at which a cluster of ``{mark <= u}`` joins the faces x_0 = 0 and x_0 = side."""
    n = len(centers)
    if n == 0:
        return math.inf
    cfg = PointConfiguration(centers, radius)
    ii, jj = build_index(cfg).pairs_within(2.0 * radius)
    left = np.nonzero(centers[:, 0] <= radius)[0]
    right = np.nonzero(centers[:, 0] >= side - radius)[0]
    t = np.concatenate([np.maximum(marks[ii], marks[jj]), marks[left], marks[right]])
    a = np.concatenate([ii, left, right]).astype(np.int64)
    b = np.concatenate([jj, np.full(len(left), n), np.full(len(right), n + 1)]).astype(np.int64)
    order = np.argsort(t, kind="stable")
    return float(_first_crossing(n, t[order], a[order], b[order]))


def _threshold_replica(p, k, stream):
    d, grid = p["d"], p["u_grid"]
    row = {}
    for j, side in enumerate(p["box_sides"]):
        top = max(grid)
        box = Box.from_bounds([[0.0, side]] * d)
        if top > 0:
            mk = sample_marked(box, top, stream.child(j))
            level = crossing_level(mk.centers, mk.marks, mk.radius, side)
        else:
            level = math.inf
        row[f"crossing_level_{side:g}"] = level
        for u in grid:
            row[f"cross_{side:g}_{u:g}"] = int(level <= u)
    return row


def interpolate_half(u_grid, p) -> float:
    """First upward crossing of 1/2 by linear interpolation (NaN if none)."""
    for i in range(len(u_grid) - 1):
        if p[i] < 0.5 <= p[i + 1]:
            return float(u_grid[i] + (0.5 - p[i]) * (u_grid[i + 1] - u_grid[i]) / (p[i + 1] - p[i]))
    if len(p) and p[0] >= 0.5:
        return float(u_grid[0])
    return math.nan


def threshold_scan(u_grid, params: SimParams, box_sides, replicas: int, rng: RngStream,
                   jobs: int = 1, on_row=None) -> ExperimentResult:
    """Left-right crossing probabilities on ``[0, side]^d`` and the 1/2-crossing estimate of u*.

    One marked sample per replica and side is restricted to every u, so the
    estimated probabilities are nondecreasing in u by construction.
    """
    grid = sorted(float(u) for u in u_grid)
    if not grid or grid[0] < 0:
        raise ConfigError("u_grid", "needs nonnegative intensities")
    sides = [float(s) for s in box_sides]
    if not sides or min(sides) <= 0:
        raise ConfigError("box_sides", "needs positive sides")
    payload = dict(d=params.d, u_grid=grid, box_sides=sides)
    rows, stopped = run_replicas(_threshold_replica, payload, replicas, rng, jobs, on_row=on_row)
    records, table, u_star = [], {}, {}
    for side in sides:
        probs, ses = [], []
        for u in grid:
            rec = EstimateRecord.from_values("crossing_probability", {"u": u, "side": side},
                                             [r[f"cross_{side:g}_{u:g}"] for r in rows],
                                             rng.seed, keep_values=False)
            records.append(rec)
            probs.append(rec.mean)
            ses.append(0.0 if not math.isfinite(rec.stderr) else rec.stderr)
        mono = all(probs[i + 1] >= probs[i] - 2 * max(ses[i], ses[i + 1]) for i in range(len(grid) - 1))
        table[f"{side:g}"] = {"u": grid, "p": probs, "stderr": ses, "monotone_within_2se": mono}
        u_star[f"{side:g}"] = interpolate_half(grid, probs)
    vals = [v for v in u_star.values() if math.isfinite(v)]
    spread = (max(vals) - min(vals)) / (sum(vals) / len(vals)) if len(vals) >= 2 else math.nan
    summary = {"table": table, "u_star": u_star, "relative_spread": spread,
               "stable_within_10pct": bool(math.isfinite(spread) and spread <= 0.10)}
    return _result("threshold", rng, rows, stopped, replicas, records, summary)


# ---------------------------------------------------------------------------
# coupled monotonicity


def _mono_replica(p, k, stream):
    d, xi, L, lo, hi = p["d"], p["xi"], p["L"], p["u_low"], p["u_high"]
    box = _line_box(L, d, eta_margin(L))
    x = np.zeros(d)
    y = np.zeros(d)
    y[0] = L
    if hi > 0:
        mk = sample_marked(box, hi, stream)
        cfg_lo, cfg_hi = restrict(mk, lo), restrict(mk, hi)
    else:
        cfg_lo = cfg_hi = PointConfiguration.empty(d)
    if xi == 0.0:
        d_lo = distance_xi0(cfg_lo, None, x, y).value
        d_hi = distance_xi0(cfg_hi, None, x, y).value
    else:
        d_lo = distance_graph_xi(cfg_lo, None, xi, x, y, p["K"]).value
        d_hi = distance_graph_xi(cfg_hi, None, xi, x, y, p["K"]).value
    if d_hi > d_lo + p["tol"]:
        raise MonotonicityViolation(f"replica {k}: dist at u={hi} is {d_hi!r} > {d_lo!r} at u={lo}")
    return {"dist_low": d_lo, "dist_high": d_hi, "pathwise_ok": True}


def coupled_monotonicity(u_low: float, u_high: float, params: SimParams, L: float,
                         replicas: int, rng: RngStream, K: int = 16, tol: float = PATHWISE_TOL,
                         u_star: float | None = None, jobs: int = 1,
                         on_row=None) -> ExperimentResult:
    """Distances from one marked sample restricted at two intensities.

    Any replica with ``dist_high > dist_low + tol`` raises
    :class:`MonotonicityViolation`.
    """
    d = params.d
    _check_u(u_low, d, u_star, "u_low")
    _check_u(u_high, d, u_star, "u_high")
    if u_low > u_high:
        raise ConfigError("u_low", "must not exceed u_high")
    payload = dict(d=d, xi=params.xi, L=float(L), u_low=float(u_low), u_high=float(u_high),
                   K=K, tol=tol)
    rows, stopped = run_replicas(_mono_replica, payload, replicas, rng, jobs, on_row=on_row)
    lo = EstimateRecord.from_values("coupled_distance", {"u": u_low, "L": L},
                                    [r["dist_low"] for r in rows], rng.seed)
    hi = EstimateRecord.from_values("coupled_distance", {"u": u_high, "L": L},
                                    [r["dist_high"] for r in rows], rng.seed)
    diff_mean, diff_se = _fsum_stats([r["dist_low"] - r["dist_high"] for r in rows])
    comb = math.sqrt(lo.stderr ** 2 + hi.stderr ** 2) if len(rows) > 1 else math.nan
    summary = {"pathwise_passes": len(rows), "replicas": len(rows),
               "mean_difference": diff_mean, "paired_stderr": diff_se, "combined_stderr": comb,
               "separated_3se": bool(len(rows) > 1 and lo.mean - hi.mean > 3 * comb)}
    return _result("monotonicity", rng, rows, stopped, replicas, [lo, hi], summary)


# ---------------------------------------------------------------------------
# shared pieces of the field experiments


def lattice_net(domain: Domain, spacing: float) -> np.ndarray:
    """Points of the lattice ``lo + spacing Z^d`` inside the domain."""
    bb = domain.bounding_box()
    axes = [bb.lo[k] + spacing * np.arange(int(math.floor(bb.sides[k] / spacing + 1e-9)) + 1)
            for k in range(domain.d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, domain.d)
    return pts[np.asarray(domain.contains(pts), dtype=bool)]


def _field_sample(fld: IntensityField, domain: Domain, R: float, margin: float,
                  stream: RngStream) -> PointConfiguration:
    region = domain.bounding_box().scaled(R).enlarged(margin)
    return sample_inhomogeneous(fld.rescaled(R), region, stream, clamp=True)


def _check_field_domain(fld: IntensityField, domain: Domain):
    reg = fld.region
    if reg is None:
        return
    bb = domain.bounding_box()
    tol = 1e-9 * (1 + np.abs(bb.hi) + np.abs(bb.lo))
    if np.any(bb.lo < reg.lo - tol) or np.any(bb.hi > reg.hi + tol):
        raise ConfigError("intensity", "the field grid must cover the domain")


def _paired_fraction(rows, key_first: str, key_last: str) -> float:
    pairs = [(r[key_first], r[key_last]) for r in rows]
    if not pairs:
        return math.nan
    return sum(1 for a, b in pairs if b < a) / len(pairs)


# ---------------------------------------------------------------------------
# distortion


def _distortion_replica(p, k, stream):
    domain, fld, net, conf = p["domain"], p["field"], p["net"], p["conformal"]
    deadline = p.get("deadline")
    m = len(net)
    row = {}
    for j, R in enumerate(p["R_list"]):
        cfg = _field_sample(fld, domain, R, 2.0, stream.child(j))
        cs = find_clusters(cfg)
        active, pokes = intrinsic_mask(cfg, cs, domain.scaled(R))
        g = BallGraph(cfg, net * R, active=active)
        dist = np.zeros((m, m))
        t0 = time.time()
        for a in range(m - 1):
            tg = [g.point(b) for b in range(a + 1, m)]
            lab, *_ = g.search(g.point(a), tg)
            dist[a, a + 1:] = lab[tg]
            if deadline is not None and a >= 2:
                per = (time.time() - t0) / (a + 1)
                rest = per * (m - 2 - a) + per * (m - 1) * (len(p["R_list"]) - j - 1)
                if time.time() + rest > deadline:
                    raise BudgetExceeded(
                        f"replica {k}, R={R:g}: {len(cfg)} balls, {per:.2f}s per search, "
                        f"projected {rest:.0f}s more for this replica exceeds the time budget")
        dist = (dist + dist.T) / R
        iu = np.triu_indices(m, 1)
        dev = np.abs(conf[iu] - dist[iu])
        row[f"sup_distortion_{R:g}"] = float(dev.max()) if dev.size else 0.0
        row[f"balls_{R:g}"] = len(cfg)
        row[f"boundary_clusters_{R:g}"] = int(pokes)
    return row


def distortion_setup(fld: IntensityField, domain: Domain, params: SimParams, net_spacing: float,
                     table: EtaTable, pair_cap: int = 10_000, grid_h: float | None = None,
                     order: int = 4) -> dict:
    """Net, conformal grid and limit distances shared by every replica."""
    if not domain.is_convex and domain.kind != "union":
        raise ConfigError("domain", "must be convex or a union of boxes")
    _check_field_domain(fld, domain)
    if table.d != params.d or table.xi != params.xi:
        raise ConfigError("table", "eta table has a different dimension or xi")
    if fld.inf_value < table.u.min() - 1e-12 or fld.sup_value > table.u.max() + 1e-12:
        raise ConfigError("table", f"field range [{fld.inf_value}, {fld.sup_value}] is outside "
                                   f"the table range [{table.u.min()}, {table.u.max()}]")
    net = lattice_net(domain, net_spacing)
    pairs = len(net) * (len(net) - 1) // 2
    if pairs > pair_cap:
        raise ConfigError("net_spacing", f"{pairs} net pairs exceed the cap of {pair_cap}")
    h = grid_h if grid_h is not None else domain.diameter / 400.0

    def rho(pts):
        return eta_lookup(table, np.asarray(fld(pts), dtype=float))

    grid = ConformalGrid(domain, h, rho=rho, order=order)
    return {"net": net, "conformal": grid.pairwise(net), "grid_h": h, "stencil_order": order}


def distortion_experiment(fld: IntensityField, domain: Domain, params: SimParams, R_list,
                          net_spacing: float | None, table: EtaTable | None, replicas: int,
                          rng: RngStream, *, pair_cap: int = 10_000, grid_h: float | None = None,
                          order: int = 4, eta_R: float = 200.0, eta_replicas: int = 20,
                          eta_points: int = 7, time_budget: float | None = None,
                          jobs: int = 1, on_row=None) -> ExperimentResult:
    """Sup over net pairs of |conformal limit distance - rescaled intrinsic distance|.

    Without a ``table``, eta is first estimated at ``eta_points`` intensities
    spanning the field's range (from a stream reserved for that purpose).
    """
    if params.xi != 0.0:
        raise ConfigError("xi", "the distortion experiment uses exact xi = 0 distances")
    R_list = sorted(float(r) for r in R_list)
    if not R_list:
        raise ConfigError("R_list", "needs at least one R")
    spacing = net_spacing if net_spacing is not None else domain.diameter / 10.0
    if table is None:
        lo, hi = fld.inf_value, fld.sup_value
        us = np.linspace(lo, hi, eta_points) if hi > lo else [lo]
        table = eta_table(us, SimParams(params.d, 0.0, eta_R), eta_R, eta_replicas,
                          rng.child(TABLE_STREAM), jobs=jobs)
    setup = distortion_setup(fld, domain, params, spacing, table, pair_cap, grid_h, order)
    payload = dict(domain=domain, field=fld, R_list=R_list, **setup)
    rows, stopped = run_replicas(_distortion_replica, payload, replicas, rng, jobs,
                                 budget=time_budget, on_row=on_row)
    records = [EstimateRecord.from_values("sup_distortion", {"R": R},
                                          [r[f"sup_distortion_{R:g}"] for r in rows], rng.seed)
               for R in R_list]
    summary = {"net_points": int(len(setup["net"])), "grid_h": setup["grid_h"],
               "stencil_order": order, "table": table.to_json()}
    if len(R_list) >= 2:
        summary["paired_fraction_decreasing"] = _paired_fraction(
            rows, f"sup_distortion_{R_list[0]:g}", f"sup_distortion_{R_list[-1]:g}")
    return _result("distortion", rng, rows, stopped, replicas, records, summary)


# ---------------------------------------------------------------------------
# measure


@dataclass(frozen=True)
class WeightFunction:
    """Test function with sup norm <= 1 and Lipschitz constant <= 1.

    ``one`` is constant 1; ``bump`` is ``clip(1 - |x - center| / width, 0, 1)``;
    ``ramp`` is ``clip((x_axis - start) / width, 0, 1)``.
    """

    kind: str
    center: tuple = ()
    width: float = 1.0
    axis: int = 0
    start: float = 0.0

    @property
    def name(self) -> str:
        return self.kind

    @property
    def lipschitz(self) -> float:
        return 0.0 if self.kind == "one" else 1.0 / self.width

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "one":
            return np.ones(x.shape[:-1])
        if self.kind == "bump":
            r = np.linalg.norm(x - np.asarray(self.center), axis=-1)
            return np.clip(1.0 - r / self.width, 0.0, 1.0)
        return np.clip((x[..., self.axis] - self.start) / self.width, 0.0, 1.0)

    @classmethod
    def parse(cls, spec, domain: Domain) -> WeightFunction:
        bb = domain.bounding_box()
        doc = {"kind": spec} if isinstance(spec, str) else dict(spec)
        kind = doc.get("kind")
        if kind == "one":
            out = cls("one")
        elif kind == "bump":
            out = cls("bump", tuple(float(c) for c in doc.get("center", (bb.lo + bb.hi) / 2)),
                      float(doc.get("width", bb.sides.min() / 2)))
        elif kind == "ramp":
            axis = int(doc.get("axis", 0))
            out = cls("ramp", (), float(doc.get("width", bb.sides[axis])), axis,
                      float(doc.get("start", bb.lo[axis])))
        else:
            raise ConfigError("test_functions", f"unknown test function {spec!r}")
        if not out.width > 0 or out.lipschitz > 1.0 + 1e-12:
            raise ConfigError("test_functions", f"{kind}: width must be >= 1 (Lipschitz <= 1)")
        return out


@numba.njit(cache=True)
def _merge_sorted(line, a, b):
    """Union of intervals already sorted by (line, start)."""
    n = line.shape[0]
    ol = np.empty(n, dtype=np.int64)
    oa = np.empty(n)
    ob = np.empty(n)
    m = -1
    for i in range(n):
        if m >= 0 and ol[m] == line[i] and a[i] <= ob[m]:
            if b[i] > ob[m]:
                ob[m] = b[i]
        else:
            m += 1
            ol[m] = line[i]
            oa[m] = a[i]
            ob[m] = b[i]
    return ol[:m + 1], oa[:m + 1], ob[:m + 1]


@numba.njit(cache=True)
def _intersect(la, aa, ab, lb, ba, bb):
    """Pairwise intersections of two merged interval lists sorted by (line, start)."""
    out_l = np.empty(la.shape[0] + lb.shape[0], dtype=np.int64)
    out_a = np.empty(out_l.shape[0])
    out_b = np.empty(out_l.shape[0])
    i = 0
    j = 0
    m = 0
    while i < la.shape[0] and j < lb.shape[0]:
        if la[i] < lb[j]:
            i += 1
            continue
        if lb[j] < la[i]:
            j += 1
            continue
        lo = max(aa[i], ba[j])
        hi = min(ab[i], bb[j])
        if hi > lo:
            out_l[m] = la[i]
            out_a[m] = lo
            out_b[m] = hi
            m += 1
        if ab[i] < bb[j]:
            i += 1
        else:
            j += 1
    return out_l[:m], out_a[:m], out_b[:m]


def _merge(line, a, b):
    order = np.lexsort((a, line))
    return _merge_sorted(line[order].astype(np.int64), a[order], b[order])


def line_sections(domain: Domain, trans: np.ndarray):
    """Intersections of lines ``{(t, trans_k)}`` with the domain, as merged (line, a, b)."""
    if domain.kind == "polytope":
        A0, At = domain.A[:, 0], domain.A[:, 1:]
        rhs = domain.b[None, :] - trans @ At.T
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = rhs / A0[None, :]
        pos, neg = A0 > 0, A0 < 0
        hi = np.min(np.where(pos[None, :], bound, np.inf), axis=1)
        lo = np.max(np.where(neg[None, :], bound, -np.inf), axis=1)
        zero_ok = np.all(np.where((A0 == 0)[None, :], rhs >= 0, True), axis=1)
        keep = zero_ok & (hi > lo)
        idx = np.nonzero(keep)[0]
        return idx.astype(np.int64), lo[keep], hi[keep]
    ls, la, lb = [], [], []
    for bx in domain.boxes:
        inside = np.all((trans >= bx.lo[1:]) & (trans <= bx.hi[1:]), axis=1)
        idx = np.nonzero(inside)[0]
        ls.append(idx)
        la.append(np.full(len(idx), bx.lo[0]))
        lb.append(np.full(len(idx), bx.hi[0]))
    return _merge(np.concatenate(ls), np.concatenate(la), np.concatenate(lb))


def covered_integrals(cfg: PointConfiguration, domain_R: Domain, R: float, funcs, spacing: float,
                      offset: np.ndarray) -> list[float]:
    """``integral of f over D ∩ S_R`` in original units for each f, by exact chords on lines.

    Lines run along axis 0 in rescaled coordinates, on a transverse lattice of
    the given spacing shifted by ``offset * spacing``; each line carries the
    weight ``(spacing / R)^(d-1)``.  Covered pieces are integrated with
    two-point Gauss.
    """
    d = cfg.d
    bb = domain_R.bounding_box()
    counts = [int(math.floor((bb.sides[k] - offset[k - 1] * spacing) / spacing)) + 1
              for k in range(1, d)]
    grids = [bb.lo[k] + (offset[k - 1] + np.arange(counts[k - 1])) * spacing for k in range(1, d)]
    trans = np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, d - 1)
    sec = line_sections(domain_R, trans)
    r = cfg.radius
    c = cfg.centers
    if len(c) == 0 or len(sec[0]) == 0:
        return [0.0 for _ in funcs]
    # lattice ranges of lines each ball meets, per transverse axis
    lo_idx = np.ceil((c[:, 1:] - r - bb.lo[1:] - offset * spacing) / spacing).astype(np.int64)
    hi_idx = np.floor((c[:, 1:] + r - bb.lo[1:] - offset * spacing) / spacing).astype(np.int64)
    lo_idx = np.maximum(lo_idx, 0)
    hi_idx = np.minimum(hi_idx, np.array(counts) - 1)
    span = np.maximum(hi_idx - lo_idx + 1, 0)
    tot = np.prod(span, axis=1)
    ball = np.repeat(np.arange(len(c)), tot)
    local = np.arange(tot.sum()) - np.repeat(np.cumsum(tot) - tot, tot)
    line = np.zeros(len(ball), dtype=np.int64)
    rest = local.copy()
    for k in range(d - 2, -1, -1):
        s = span[ball, k]
        idx_k = lo_idx[ball, k] + rest % s
        rest //= s
        line = line + idx_k * int(np.prod(counts[k + 1:]))
    tpos = trans[line]
    h2 = r * r - ((c[ball, 1:] - tpos) ** 2).sum(1)
    keep = h2 > 0
    ball, line, h = ball[keep], line[keep], np.sqrt(h2[keep])
    cov = _merge(line, c[ball, 0] - h, c[ball, 0] + h)
    pl, pa, pb = _intersect(*cov, *sec)
    if len(pl) == 0:
        return [0.0 for _ in funcs]
    mid, half = (pa + pb) / 2, (pb - pa) / 2
    gx = np.concatenate([mid - half / math.sqrt(3.0), mid + half / math.sqrt(3.0)])
    pts = np.concatenate([np.column_stack([gx[:len(pl)], trans[pl]]),
                          np.column_stack([gx[len(pl):], trans[pl]])]) / R
    w_line = (spacing / R) ** (d - 1)
    out = []
    for f in funcs:
        fv = f(pts)
        vals = (fv[:len(pl)] + fv[len(pl):]) * (half / R)
        out.append(math.fsum(vals.tolist()) * w_line)
    return out


def midpoint_integral(g: Callable, domain: Domain, n: int) -> float:
    """Midpoint rule on an n^d grid over the bounding box, restricted to the domain."""
    bb = domain.bounding_box()
    h = bb.sides / n
    axes = [bb.lo[k] + (np.arange(n) + 0.5) * h[k] for k in range(domain.d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, domain.d)
    inside = np.asarray(domain.contains(pts), dtype=bool)
    vals = g(pts[inside])
    return math.fsum(np.asarray(vals, dtype=float).tolist()) * float(np.prod(h))


def _measure_replica(p, k, stream):
    domain, fld, funcs = p["domain"], p["field"], p["funcs"]
    d, xi = p["d"], p["xi"]
    row = {}
    for j, R in enumerate(p["R_list"]):
        s = stream.child(j)
        cfg = _field_sample(fld, domain, R, 1.0, s.child(0))
        offset = s.child(1).generator().random(d - 1)
        cov = covered_integrals(cfg, domain.scaled(R), R, funcs, p["line_spacing"], offset)
        for f, ic, total, target in zip(funcs, cov, p["f_integrals"], p["cov_targets"]):
            nu = total - (1.0 - xi ** d) * ic
            mu = total - (1.0 - xi ** d) * target
            row[f"nu_{f.name}_{R:g}"] = nu
            row[f"mu_{f.name}_{R:g}"] = mu
            row[f"abs_diff_{f.name}_{R:g}"] = abs(nu - mu)
    return row


def measure_experiment(fld: IntensityField, domain: Domain, params: SimParams, R_list,
                       test_functions, replicas: int, rng: RngStream, *,
                       line_spacing: float = 1.0, quadrature: int | None = None,
                       jobs: int = 1, on_row=None) -> ExperimentResult:
    """``|nu_R(f) - mu_{sigma o u}(f)|`` per replica, R and test function.

    Since ``1 - sigma^d = (1 - xi^d) P(covered)``, the difference equals
    ``(1 - xi^d) |integral over D ∩ S_R of f - integral of f (1 - e^{-u kappa})|``;
    the first term comes from exact chords along lines, the second from
    midpoint quadrature.
    """
    d, xi = params.d, params.xi
    _check_field_domain(fld, domain)
    funcs = [WeightFunction.parse(s, domain) for s in test_functions]
    if len({f.name for f in funcs}) != len(funcs):
        raise ConfigError("test_functions", "duplicate test function kinds")
    R_list = sorted(float(r) for r in R_list)
    if not R_list:
        raise ConfigError("R_list", "needs at least one R")
    if not line_spacing > 0:
        raise ConfigError("line_spacing", "must be positive")
    n = quadrature if quadrature is not None else (1000 if d == 2 else 100)
    f_int = [midpoint_integral(f, domain, n) for f in funcs]
    cov_t = [midpoint_integral(lambda x, f=f: f(x) * (1.0 - vacant_probability(fld(x), d)),
                               domain, n) for f in funcs]
    payload = dict(domain=domain, field=fld, funcs=funcs, d=d, xi=xi, R_list=R_list,
                   line_spacing=float(line_spacing), f_integrals=f_int, cov_targets=cov_t)
    rows, stopped = run_replicas(_measure_replica, payload, replicas, rng, jobs, on_row=on_row)
    records = []
    summary: dict[str, Any] = {"target": {}, "paired_fraction_decreasing": {}}
    for f, total, target in zip(funcs, f_int, cov_t):
        summary["target"][f.name] = total - (1.0 - xi ** d) * target
        for R in R_list:
            records.append(EstimateRecord.from_values(
                "measure_abs_diff", {"R": R, "f": f.name},
                [r[f"abs_diff_{f.name}_{R:g}"] for r in rows], rng.seed))
        if len(R_list) >= 2:
            summary["paired_fraction_decreasing"][f.name] = _paired_fraction(
                rows, f"abs_diff_{f.name}_{R_list[0]:g}", f"abs_diff_{f.name}_{R_list[-1]:g}")
    return _result("measure", rng, rows, stopped, replicas, records, summary)


# ---------------------------------------------------------------------------
# surjectivity


SURJ_MARGIN = 10.0


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def vacancy_depth(cfg: PointConfiguration, probes: np.ndarray, sphere_points: int = 400):
    """Distance from each probe to the complement of the union of balls.

    Exact in 2D (nearest point on an uncovered boundary arc).  In 3D the
    uncovered boundary is sampled at ``sphere_points`` directions per ball,
    which overestimates by at most the sampling gap.  Returns ``(depth, exact)``.
    """
    probes = np.asarray(probes, dtype=float).reshape(-1, cfg.d)
    if len(cfg) == 0 or len(probes) == 0:
        return np.zeros(len(probes)), True
    r = cfg.radius
    if cfg.d == 2:
        ii, jj = build_index(cfg).pairs_within(2.0 * r)
        starts, items = _geometry.neighbour_csr(len(cfg), ii, jj)
        arc_starts, arc_lo, arc_hi = _geometry.uncovered_arcs(cfg.centers, r, starts, items)
        origin, shape, cstarts, citems = _geometry.grid_buckets(cfg.centers, 2.0 * r)
        depth = _geometry.depth(cfg.centers, r, arc_starts, arc_lo, arc_hi, origin, 2.0 * r,
                                shape, cstarts, citems, probes)
        return depth, True
    tree = cKDTree(cfg.centers)
    dirs = _fibonacci_sphere(sphere_points)
    surf = (cfg.centers[:, None, :] + r * dirs[None, :, :]).reshape(-1, cfg.d)
    nd, _ = tree.query(surf, k=2)
    free = surf[nd[:, 1] >= r * (1 - 1e-12)] if len(cfg) > 1 else surf
    dist, _ = tree.query(probes, k=1)
    depth = np.zeros(len(probes))
    inside = dist <= r
    if np.any(inside) and len(free):
        depth[inside], _ = cKDTree(free).query(probes[inside], k=1)
    return depth, False


def _surj_replica(p, k, stream):
    domain, fld, grid = p["domain"], p["field"], p["grid"]
    row = {}
    for j, R in enumerate(p["R_list"]):
        cfg = _field_sample(fld, domain, R, SURJ_MARGIN, stream.child(j))
        dom_R = domain.scaled(R)
        centers_in = cfg.centers[np.asarray(dom_R.contains(cfg.centers), dtype=bool)] \
            if len(cfg) else np.zeros((0, cfg.d))
        probes = np.vstack([grid * R, centers_in])
        depth, exact = vacancy_depth(cfg, probes)
        row[f"hausdorff_{R:g}"] = float(depth.max()) / R if len(depth) else 0.0
        row[f"exact_{R:g}"] = int(exact)
    return row


def surjectivity_experiment(domain: Domain, fld: IntensityField, params: SimParams, R_list,
                            probe_spacing: float | None, replicas: int, rng: RngStream, *,
                            jobs: int = 1, on_row=None) -> ExperimentResult:
    """Hausdorff distance from D to its vacant part, in original units.

    Probes are a lattice of the given spacing plus every ball center inside
    ``R D`` (the deepest covered points sit near centers, which a coarse
    lattice would miss).
    """
    if params.xi != 0.0:
        raise ConfigError("xi", "the surjectivity experiment needs xi = 0")
    _check_field_domain(fld, domain)
    R_list = sorted(float(r) for r in R_list)
    if not R_list:
        raise ConfigError("R_list", "needs at least one R")
    spacing = probe_spacing if probe_spacing is not None else domain.diameter / 100.0
    if not spacing > 0:
        raise ConfigError("probe_spacing", "must be positive")
    payload = dict(domain=domain, field=fld, R_list=R_list, grid=lattice_net(domain, spacing))
    rows, stopped = run_replicas(_surj_replica, payload, replicas, rng, jobs, on_row=on_row)
    records = [EstimateRecord.from_values("hausdorff_to_vacant", {"R": R},
                                          [r[f"hausdorff_{R:g}"] for r in rows], rng.seed)
               for R in R_list]
    summary: dict[str, Any] = {"probe_spacing": spacing}
    if len(R_list) >= 2:
        summary["paired_fraction_decreasing"] = _paired_fraction(
            rows, f"hausdorff_{R_list[0]:g}", f"hausdorff_{R_list[-1]:g}")
    return _result("surjectivity", rng, rows, stopped, replicas, records, summary)


# ---------------------------------------------------------------------------
# configuration


KIND_ALIASES = {
    "estimate_eta": "eta", "estimate_volume_fraction": "volume", "volume_fraction": "volume",
    "geodesic_deviation": "geodesic", "threshold_scan": "threshold",
    "coupled_monotonicity": "monotonicity", "distortion_experiment": "distortion",
    "measure_experiment": "measure", "surjectivity_experiment": "surjectivity",
}

KIND_OPTIONS: dict[str, dict[str, Any]] = {
    "eta": {"margin": None, "K": 16, "max_edge": 6.0},
    "volume": {"box_side": 50.0, "probes": 100_000},
    "geodesic": {"lengths": [50.0, 100.0, 200.0]},
    "cluster_tail": {"box_side": 100.0, "band": [1e-3, 1e-1]},
    "threshold": {"u_grid": None, "box_sides": [40.0, 80.0]},
    "monotonicity": {"u_low": None, "u_high": None, "L": 100.0, "K": 16,
                     "tolerance": PATHWISE_TOL},
    "distortion": {"net_spacing": None, "pair_cap": 10_000, "grid_h": None,
                   "stencil_order": 4, "table": None, "eta_R": 200.0, "eta_replicas": 20,
                   "eta_points": 7, "time_budget": None},
    "measure": {"test_functions": ["one", "bump"], "line_spacing": 1.0, "quadrature": None},
    "surjectivity": {"probe_spacing": None},
}

_NEEDS = {
    "eta": ("u", "R_list"), "volume": ("u",), "geodesic": ("u",), "cluster_tail": ("u",),
    "threshold": ("u_grid",), "monotonicity": ("u_low", "u_high"),
    "distortion": ("domain", "R_list"), "measure": ("domain", "R_list"),
    "surjectivity": ("domain", "R_list"),
}

_TOP = ("schema", "kind", "d", "xi", "u", "intensity", "domain", "R_list", "replicas",
        "u_star", "allow_supercritical", "outputs")


@dataclass
class ExperimentConfig:
    kind: str
    d: int = 2
    xi: float = 0.0
    u: float | None = None
    intensity: IntensityField | None = None
    domain: Domain | None = None
    R_list: list = field(default_factory=list)
    replicas: int = 1
    u_star: float | None = None
    allow_supercritical: bool = False
    options: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_json(cls, doc: dict) -> ExperimentConfig:
        """Parse and validate; every error is a :class:`ConfigError` naming its field."""
        if not isinstance(doc, dict):
            raise ConfigError("config", "must be a JSON object")
        schema = doc.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError("schema", f"unsupported schema {schema!r} (expected {SCHEMA})")
        kind = doc.get("kind")
        kind = KIND_ALIASES.get(kind, kind)
        if kind not in KIND_OPTIONS:
            raise ConfigError("kind", f"unknown kind {doc.get('kind')!r}; expected one of "
                                      f"{sorted(KIND_OPTIONS)}")
        unknown = [k for k in doc if k not in _TOP and k not in KIND_OPTIONS[kind]]
        if unknown:
            raise ConfigError(unknown[0], f"not a recognised field for kind {kind!r}")
        try:
            sp = SimParams(int(doc.get("d", 2)), float(doc.get("xi", 0.0)))
        except (InvalidParameter, TypeError, ValueError) as exc:
            name = "xi" if "xi" in str(exc) else "d"
            raise ConfigError(name, str(exc)) from None
        u_star = doc.get("u_star")
        if u_star is not None and not (isinstance(u_star, (int, float)) and u_star > 0):
            raise ConfigError("u_star", "must be a positive number")
        allow = bool(doc.get("allow_supercritical", False))
        replicas = doc.get("replicas", 1)
        if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 1:
            raise ConfigError("replicas", "must be a positive integer")
        u = doc.get("u")
        if u is not None and not (isinstance(u, (int, float)) and not isinstance(u, bool)):
            raise ConfigError("u", "must be a number")
        us = u_star if u_star is not None else default_u_star(sp.d)
        fld = None
        if "intensity" in doc:
            try:
                fld = IntensityField.from_json(doc["intensity"], u_star=us,
                                               allow_supercritical=allow)
            except (InvalidParameter, KeyError, TypeError, ValueError) as exc:
                raise ConfigError("intensity", str(exc)) from None
        elif u is not None and kind in ("distortion", "measure", "surjectivity"):
            try:
                fld = IntensityField.constant(u, u_star=us, allow_supercritical=allow)
            except InvalidParameter as exc:
                raise ConfigError("u", str(exc)) from None
        dom = None
        if "domain" in doc:
            try:
                dom = Domain.from_json(doc["domain"])
            except (InvalidParameter, KeyError, TypeError, ValueError) as exc:
                raise ConfigError("domain", str(exc)) from None
            if dom.d != sp.d:
                raise ConfigError("domain", f"dimension {dom.d} does not match d = {sp.d}")
        R_list = doc.get("R_list", [])
        if not isinstance(R_list, list) or not all(
                isinstance(r, (int, float)) and not isinstance(r, bool) and r > 0 for r in R_list):
            raise ConfigError("R_list", "must be a list of positive numbers")
        opts = {}
        for key, default in KIND_OPTIONS[kind].items():
            opts[key] = doc.get(key, default)
        cfg = cls(kind, sp.d, sp.xi, None if u is None else float(u), fld, dom,
                  [float(r) for r in R_list], replicas, u_star, allow, opts,
                  dict(doc.get("outputs", {})), dict(doc))
        for need in _NEEDS[kind]:
            present = {"u": cfg.u is not None, "R_list": bool(cfg.R_list),
                       "domain": cfg.domain is not None}.get(need, opts.get(need) is not None)
            if not present:
                raise ConfigError(need, f"required for kind {kind!r}")
        if kind in ("distortion", "measure", "surjectivity") and cfg.intensity is None:
            raise ConfigError("intensity", f"required for kind {kind!r} (or give u)")
        cfg.validate()
        return cfg

    @property
    def params(self) -> SimParams:
        return SimParams(self.d, self.xi)

    def validate(self):
        """Check the target operation's preconditions (no sampling happens here)."""
        k, o = self.kind, self.options
        if k in ("eta", "volume", "geodesic", "cluster_tail") and not self.allow_supercritical:
            _check_u(self.u, self.d, self.u_star)
        if k in ("geodesic", "distortion", "surjectivity") and self.xi != 0.0:
            raise ConfigError("xi", f"kind {k!r} needs xi = 0")
        if k == "monotonicity":
            for name in ("u_low", "u_high"):
                _check_u(o[name], self.d, self.u_star, name)
            if o["u_low"] > o["u_high"]:
                raise ConfigError("u_low", "must not exceed u_high")
            _positive(o, "L")
        if k == "threshold":
            grid = o["u_grid"]
            if not isinstance(grid, list) or not grid or any(
                    not isinstance(u, (int, float)) or u < 0 for u in grid):
                raise ConfigError("u_grid", "must be a nonempty list of intensities >= 0")
            _positive_list(o, "box_sides")
        if k == "geodesic":
            _positive_list(o, "lengths")
        if k in ("volume", "cluster_tail"):
            _positive(o, "box_side")
        if k == "volume" and (not isinstance(o["probes"], int) or o["probes"] < 1):
            raise ConfigError("probes", "must be a positive integer")
        if k in ("distortion", "measure", "surjectivity"):
            try:
                _check_field_domain(self.intensity, self.domain)
            except ConfigError:
                raise
        if k == "distortion":
            if not self.domain.is_convex and self.domain.kind != "union":
                raise ConfigError("domain", "must be convex or a union of boxes")
            if o["net_spacing"] is not None:
                _positive(o, "net_spacing")
                net = lattice_net(self.domain, o["net_spacing"])
                if len(net) * (len(net) - 1) // 2 > o["pair_cap"]:
                    raise ConfigError("net_spacing", "net pair count exceeds pair_cap")
            if o["time_budget"] is not None:
                _positive(o, "time_budget")
        if k == "measure":
            for s in o["test_functions"]:
                WeightFunction.parse(s, self.domain)
            _positive(o, "line_spacing")
        if k == "surjectivity" and o["probe_spacing"] is not None:
            _positive(o, "probe_spacing")

    def to_json(self) -> dict:
        return dict(self.source) if self.source else {"schema": SCHEMA, "kind": self.kind}


def _positive(o: dict, name: str):
    v = o[name]
    if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0):
        raise ConfigError(name, "must be a positive number")


def _positive_list(o: dict, name: str):
    v = o[name]
    if not isinstance(v, list) or not v or any(
            not isinstance(x, (int, float)) or x <= 0 for x in v):
        raise ConfigError(name, "must be a nonempty list of positive numbers")


def _load_table(spec) -> EtaTable:
    try:
        return EtaTable.from_json(spec)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("table", f"cannot read eta table: {exc}") from None


def run_experiment(cfg: ExperimentConfig, seed: int, jobs: int = 1,
                   on_row: Callable | None = None) -> ExperimentResult:
    """Dispatch a validated configuration to its estimator."""
    rng = RngStream(seed)
    o, sp, n = cfg.options, cfg.params, cfg.replicas
    kw = dict(jobs=jobs, on_row=on_row)
    if cfg.kind == "eta":
        return estimate_eta(cfg.u, sp, cfg.R_list, n, rng, margin=o["margin"], K=o["K"],
                            max_edge=o["max_edge"], u_star=_ustar(cfg), **kw)
    if cfg.kind == "volume":
        return estimate_volume_fraction(cfg.u, sp, o["box_side"], n, rng, o["probes"],
                                        u_star=_ustar(cfg), **kw)
    if cfg.kind == "geodesic":
        return geodesic_deviation(cfg.u, sp, o["lengths"], n, rng, u_star=_ustar(cfg), **kw)
    if cfg.kind == "cluster_tail":
        return cluster_tail(cfg.u, sp, o["box_side"], n, rng, tuple(o["band"]),
                            u_star=_ustar(cfg), **kw)
    if cfg.kind == "threshold":
        return threshold_scan(o["u_grid"], sp, o["box_sides"], n, rng, **kw)
    if cfg.kind == "monotonicity":
        return coupled_monotonicity(o["u_low"], o["u_high"], sp, o["L"], n, rng, K=o["K"],
                                    tol=o["tolerance"], u_star=cfg.u_star, **kw)
    if cfg.kind == "distortion":
        table = _load_table(o["table"]) if o["table"] is not None else None
        return distortion_experiment(cfg.intensity, cfg.domain, sp, cfg.R_list, o["net_spacing"],
                                     table, n, rng, pair_cap=o["pair_cap"], grid_h=o["grid_h"],
                                     order=o["stencil_order"], eta_R=o["eta_R"],
                                     eta_replicas=o["eta_replicas"], eta_points=o["eta_points"],
                                     time_budget=o["time_budget"], **kw)
    if cfg.kind == "measure":
        return measure_experiment(cfg.intensity, cfg.domain, sp, cfg.R_list, o["test_functions"],
                                  n, rng, line_spacing=o["line_spacing"],
                                  quadrature=o["quadrature"], **kw)
    if cfg.kind == "surjectivity":
        return surjectivity_experiment(cfg.domain, cfg.intensity, sp, cfg.R_list,
                                       o["probe_spacing"], n, rng, **kw)
    raise ConfigError("kind", f"unknown kind {cfg.kind!r}")


def _ustar(cfg: ExperimentConfig) -> float | None:
    if cfg.allow_supercritical:
        return math.inf
    return cfg.u_star
