import numpy as np
import pytest

from defect_fpp import InvalidParameter, NotFound, PointConfiguration
from defect_fpp.clusters import (build_index, cluster_diameter, cluster_set_distance,
                                 find_clusters, point_cluster_distance)
from oracles import clusters_bfs


def cfg(*pts):
    return PointConfiguration(np.array(pts, dtype=float), 1.0)


def test_empty_index():
    idx = build_index(PointConfiguration.empty(2))
    assert len(idx) == 0 and idx.n_cells == 0
    assert idx.query([0, 0], 5.0).size == 0


def test_close_pair_are_candidates():
    idx = build_index(cfg((0, 0), (1.5, 0)))
    assert 1 in idx.query([0, 0], 2.0)
    assert 0 in idx.query([1.5, 0], 2.0)


def test_grid_locality():
    idx = build_index(cfg((0, 0), (5, 0)), cell_size=2.0)
    _, visited = idx.query([0, 0], 2.0, return_cells=True)
    far_cell = tuple(idx.cell_of([5, 0]))
    assert far_cell not in [tuple(v) for v in visited]


def test_chain_is_one_cluster():
    assert find_clusters(cfg((0, 0), (1.5, 0), (3.0, 0))).n_clusters == 1


def test_gap_splits_clusters():
    assert find_clusters(cfg((0, 0), (2.5, 0))).n_clusters == 2


def test_tangent_balls_join():
    assert find_clusters(cfg((0, 0), (2.0, 0))).n_clusters == 1


@pytest.mark.parametrize("seed", range(5))
def test_clusters_match_bfs(seed):
    g = np.random.default_rng(seed)
    c = g.uniform(0, 20, (100, 2))
    cs = find_clusters(PointConfiguration(c, 1.0))
    assert cs.partition() == frozenset(frozenset(s) for s in clusters_bfs(c, 1.0))


def test_pairs_within_matches_brute_force():
    g = np.random.default_rng(3)
    c = g.uniform(0, 10, (200, 3))
    ii, jj = build_index(PointConfiguration(c, 1.0)).pairs_within(2.0)
    got = set(zip(ii.tolist(), jj.tolist()))
    dd = np.linalg.norm(c[:, None] - c[None], axis=-1)
    want = {(i, j) for i in range(200) for j in range(i + 1, 200) if dd[i, j] <= 2.0}
    assert got == want


def test_diameters():
    assert cluster_diameter(find_clusters(cfg((0, 0))), 0) == 2.0
    assert cluster_diameter(find_clusters(cfg((0, 0), (1.5, 0))), 0) == 3.5
    k = 6
    chain = find_clusters(cfg(*[(2.0 * i, 0) for i in range(k)]))
    assert cluster_diameter(chain, 0) == pytest.approx(2.0 * k)


def test_bad_cluster_id():
    cs = find_clusters(cfg((0, 0)))
    with pytest.raises(NotFound):
        cluster_diameter(cs, 1)
    with pytest.raises(NotFound):
        point_cluster_distance(cs, [0, 0], -1)


def test_set_distances():
    cs = find_clusters(cfg((0, 0), (5, 0)))
    assert cluster_set_distance(cs, 0, 1) == 3.0
    cs = find_clusters(cfg((0, 0), (2.1, 0)))
    assert cluster_set_distance(cs, 0, 1) == pytest.approx(0.1)
    with pytest.raises(InvalidParameter):
        cluster_set_distance(cs, 0, 0)


def test_set_distance_brute_force():
    g = np.random.default_rng(8)
    c = g.uniform(0, 30, (50, 2))
    cs = find_clusters(PointConfiguration(c, 1.0))
    for a in range(min(cs.n_clusters, 12)):
        for b in range(a + 1, min(cs.n_clusters, 12)):
            pa, pb = c[cs.members(a)], c[cs.members(b)]
            want = max(0.0, min(np.linalg.norm(p - q) for p in pa for q in pb) - 2.0)
            assert cluster_set_distance(cs, a, b) == pytest.approx(want, abs=1e-12)


def test_point_distances():
    cs = find_clusters(cfg((0, 0)))
    assert point_cluster_distance(cs, [4, 0], 0) == 3.0
    assert point_cluster_distance(cs, [0.3, 0.2], 0) == 0.0
    g = np.random.default_rng(2)
    c = g.uniform(0, 10, (30, 2))
    cs = find_clusters(PointConfiguration(c, 1.0))
    for _ in range(20):
        p = g.uniform(-2, 12, 2)
        for cid in range(cs.n_clusters):
            want = max(0.0, min(np.linalg.norm(c[i] - p) for i in cs.members(cid)) - 1.0)
            assert point_cluster_distance(cs, p, cid) == pytest.approx(want, abs=1e-12)


def test_cluster_csv():
    text = find_clusters(cfg((0, 0), (1.5, 0), (10, 0))).to_csv()
    lines = text.splitlines()
    assert lines[0] == "cluster_id,size,diameter,bbox_lo_0,bbox_lo_1,bbox_hi_0,bbox_hi_1"
    assert lines[1].startswith("0,2,3.5,")
