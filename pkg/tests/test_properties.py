"""Property tests for the invariants that must hold on every input."""

import math

import numpy as np
from hypothesis import assume, given, strategies as st

from defect_fpp import PointConfiguration
from defect_fpp.clusters import find_clusters
from defect_fpp.estimators import _fsum_stats, vacancy_depth
from defect_fpp.limits import EtaTable, eta_lookup, eta_upper_bound, sigma
from defect_fpp.metric import distance_graph_xi, distance_xi0, segment_cost
from defect_fpp.sampler import RngStream, dump_csv, load_csv, restrict, sample_marked
from oracles import clusters_bfs

coord = st.floats(-2.0, 12.0, allow_nan=False, allow_infinity=False)
point = st.tuples(coord, coord).map(np.array)
centers = st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), max_size=25).map(
    lambda c: np.array(c, dtype=float).reshape(-1, 2))


def cfg_of(c):
    return PointConfiguration(c, 1.0)


@given(centers, point, point)
def test_symmetric_and_bounded(c, x, y):
    cfg = cfg_of(c)
    a = distance_xi0(cfg, None, x, y).value
    b = distance_xi0(cfg, None, y, x).value
    assert abs(a - b) <= 1e-12
    assert 0.0 <= a <= float(np.linalg.norm(x - y)) + 1e-12


@given(centers, point, point, point)
def test_triangle(c, x, y, z):
    cfg = cfg_of(c)
    xy = distance_xi0(cfg, None, x, y).value
    yz = distance_xi0(cfg, None, y, z).value
    xz = distance_xi0(cfg, None, x, z).value
    assert xz <= xy + yz + 1e-9


@given(centers, point, point, st.tuples(st.floats(0, 10), st.floats(0, 10)))
def test_adding_a_ball_never_lengthens(c, x, y, extra):
    before = distance_xi0(cfg_of(c), None, x, y).value
    after = distance_xi0(cfg_of(np.vstack([c, [extra]])), None, x, y).value
    assert after <= before + 1e-9


@given(centers, point, point, st.floats(0, 0.99))
def test_segment_cost_bounds(c, a, b, xi):
    L = float(np.linalg.norm(a - b))
    v = segment_cost(cfg_of(c), xi, a, b)
    assert xi * L - 1e-9 <= v <= L + 1e-9


@given(st.lists(st.tuples(st.floats(0, 6), st.floats(0, 6)), max_size=6).map(
    lambda c: np.array(c, dtype=float).reshape(-1, 2)), point, point, st.floats(0.05, 0.95))
def test_graph_xi_bracketing(c, x, y, xi):
    L = float(np.linalg.norm(x - y))
    v = distance_graph_xi(cfg_of(c), None, xi, x, y, 8).value
    assert xi * L - 1e-9 <= v <= L + 1e-9


@given(centers)
def test_clusters_match_bfs(c):
    cs = find_clusters(cfg_of(c))
    got = {frozenset(np.nonzero(cs.labels == k)[0].tolist()) for k in range(cs.n_clusters)}
    assert got == {frozenset(s) for s in clusters_bfs(c, 1.0)}


@given(centers, st.lists(point, min_size=1, max_size=10))
def test_depth_range(c, probes):
    probes = np.array(probes)
    depth, _ = vacancy_depth(cfg_of(c), probes)
    assert np.all(depth >= 0) and np.all(depth <= 1.0 + 1e-12)
    if len(c):
        nearest = np.min(np.linalg.norm(probes[:, None] - c[None], axis=-1), axis=1)
        assert np.all(depth[nearest > 1.0] == 0.0)
        # a probe is at least as deep as its margin inside the nearest ball
        assert np.all(depth >= 1.0 - nearest - 1e-12)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 0.99), st.sampled_from([2, 3]))
def test_sigma_and_bound_monotone(u1, u2, xi, d):
    assume(u1 < u2)
    assert sigma(u2, xi, d) <= sigma(u1, xi, d)
    assert eta_upper_bound(u2, xi, d) <= eta_upper_bound(u1, xi, d)
    if u1 >= 1e-4:  # below this both round to 1.0
        assert eta_upper_bound(u1, xi, d) < sigma(u1, xi, d)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6, unique=True),
       st.floats(0, 1))
def test_lookup_monotone_and_bracketed(us, t):
    us = sorted(us)
    etas = list(np.linspace(0.9, 0.2, len(us)))
    table = EtaTable(2, 0.0, [0.0] + us, [1.0] + etas, 0.0)
    q = t * us[-1]
    v = eta_lookup(table, q)
    k = np.searchsorted(table.u, q)
    lo, hi = table.eta[min(k, len(us))], table.eta[max(k - 1, 0)]
    assert lo - 1e-12 <= v <= hi + 1e-12
    assert eta_lookup(table, min(q + 0.01, us[-1])) <= v + 1e-12


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50), st.randoms())
def test_aggregation_order_free(vals, rnd):
    m0, s0 = _fsum_stats(vals)
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    m1, s1 = _fsum_stats(shuffled)
    assert m0 == m1
    assert math.isclose(s0, s1, rel_tol=1e-12, abs_tol=1e-12)


@given(st.integers(0, 2**63), st.floats(0.05, 0.4), st.floats(0.0, 1.0))
def test_coupling_nested_and_reproducible(seed, u_max, frac):
    box = [[0, 8], [0, 8]]
    mk = sample_marked(box, u_max, RngStream(seed))
    again = sample_marked(box, u_max, RngStream(seed))
    assert np.array_equal(mk.centers, again.centers) and np.array_equal(mk.marks, again.marks)
    low, high = restrict(mk, frac * u_max), restrict(mk, u_max)
    assert {tuple(p) for p in low.centers} <= {tuple(p) for p in high.centers}


@given(st.integers(0, 2**63), st.integers(0, 2**20))
def test_child_streams_differ(seed, tag):
    a = RngStream(seed).child(tag).generator().random(4)
    b = RngStream(seed).child(tag + 1).generator().random(4)
    assert not np.array_equal(a, b)


@given(centers)
def test_csv_roundtrip_exact(c):
    back = load_csv(dump_csv(cfg_of(c)) + ("" if len(c) else "\n"))
    assert np.array_equal(back.centers, c.reshape(-1, 2))
