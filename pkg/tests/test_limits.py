import math

import numpy as np
import pytest

from defect_fpp import Domain, InvalidParameter, OutOfDomain
from defect_fpp.limits import (ConformalGrid, EtaTable, conformal_distance, eta_lookup,
                               eta_upper_bound, merge_tables, sigma, stencil,
                               stencil_anisotropy)


def test_sigma_at_zero_is_one():
    for xi in (0.0, 0.3, 0.9):
        for d in (2, 3):
            assert sigma(0.0, xi, d) == 1.0
            assert eta_upper_bound(0.0, xi, d) == 1.0


def test_sigma_value():
    assert sigma(0.2, 0.0, 2) == pytest.approx(math.exp(-0.1 * math.pi), abs=1e-15)
    assert sigma(0.2, 0.0, 2) == pytest.approx(0.730403, abs=1e-6)
    p = math.exp(-0.3 * math.pi)
    assert sigma(0.3, 0.5, 2) == pytest.approx(math.sqrt(p + 0.25 * (1 - p)), abs=1e-15)


def test_bound_value():
    assert eta_upper_bound(0.2, 0.0, 2) == pytest.approx(0.533488, abs=1e-6)
    assert eta_upper_bound(0.2, 0.0, 2) == pytest.approx(sigma(0.2, 0.0, 2) ** 2, abs=1e-15)


def test_bound_below_sigma():
    u = np.linspace(0.01, 2.0, 200)
    for xi in (0.0, 0.2, 0.7):
        for d in (2, 3):
            assert np.all(eta_upper_bound(u, xi, d) < sigma(u, xi, d))


def test_decreasing_and_identity():
    u = np.linspace(0, 2, 401)
    for xi in (0.0, 0.5):
        for d in (2, 3):
            s = sigma(u, xi, d)
            assert np.all(np.diff(s) < 0) and np.all(np.diff(eta_upper_bound(u, xi, d)) < 0)
            kd = math.pi if d == 2 else 4 * math.pi / 3
            p = np.exp(-u * kd)
            assert np.allclose(s**d, p + xi**d * (1 - p), rtol=0, atol=1e-14)


@pytest.mark.parametrize("args", [(-0.1, 0.0, 2), (0.1, 1.0, 2), (0.1, -0.1, 2), (0.1, 0.0, 1)])
def test_invalid(args):
    with pytest.raises(InvalidParameter):
        sigma(*args)
    with pytest.raises(InvalidParameter):
        eta_upper_bound(*args)


TABLE = EtaTable(2, 0.0, [0.0, 0.1, 0.2], [1.0, 0.8, 0.6], [0.0, 0.01, 0.01], 200.0, 50)


def test_lookup():
    assert eta_lookup(TABLE, 0.0) == 1.0
    assert eta_lookup(TABLE, 0.1) == 0.8
    v = eta_lookup(TABLE, 0.15)
    assert 0.6 <= v <= 0.8 and v == pytest.approx(0.7)
    with pytest.raises(OutOfDomain):
        eta_lookup(TABLE, 0.25)
    with pytest.raises(OutOfDomain):
        eta_lookup(TABLE, -0.01)


def test_table_roundtrip_and_problems(tmp_path):
    TABLE.save(tmp_path / "t.json")
    back = EtaTable.from_json(tmp_path / "t.json")
    assert back.to_json() == TABLE.to_json()
    assert TABLE.problems() == []
    bad = EtaTable(2, 0.0, [0.1, 0.2], [0.8, 0.9], [0.001, 0.001])
    probs = bad.problems()
    assert any("eta(0)" in p for p in probs) and any("increases" in p for p in probs)
    assert EtaTable(2, 0.0, [0.0, 0.1], [1.0, 0.0], 0.0).problems()


def test_table_rejects_duplicates_and_garbage():
    with pytest.raises(InvalidParameter):
        EtaTable(2, 0.0, [0.0, 0.0], [1.0, 1.0], 0.0)
    with pytest.raises(InvalidParameter):
        EtaTable.from_json({"d": 2})


def test_merge_pools_by_inverse_variance():
    a = EtaTable(2, 0.0, [0.0, 0.1], [1.0, 0.80], [0.0, 0.02], 200.0, 10)
    b = EtaTable(2, 0.0, [0.0, 0.1, 0.2], [1.0, 0.84, 0.6], [0.0, 0.01, 0.01], 200.0, 40)
    m = merge_tables([a, b])
    assert list(m.u) == [0.0, 0.1, 0.2]
    # weights 1/0.02^2 and 1/0.01^2, i.e. 1 : 4
    assert m.eta[1] == pytest.approx((0.80 + 4 * 0.84) / 5)
    assert m.stderr[1] == pytest.approx(1 / math.sqrt(1 / 0.02**2 + 1 / 0.01**2))
    assert m.replicas == 50 and m.R == 200.0
    with pytest.raises(InvalidParameter):
        merge_tables([a, EtaTable(3, 0.0, [0.0], [1.0], 0.0)])


def test_stencil_sizes():
    assert len(stencil(2, 1)) == 4
    assert len(stencil(2, 2)) == 8     # 16 neighbours
    assert len(stencil(3, 1)) == 13    # 26 neighbours


def test_anisotropy_by_order():
    # worst overestimate is 1/cos(half the widest angular gap) - 1
    assert stencil_anisotropy(1) == pytest.approx(1 / math.cos(math.pi / 8) - 1, rel=1e-4)
    vals = [stencil_anisotropy(k) for k in (1, 2, 3, 4)]
    assert vals == sorted(vals, reverse=True)
    assert vals[1] == pytest.approx(0.0275, abs=5e-4)
    assert vals[3] < 0.008


def test_conformal_diagonal_constant():
    side = 1.0
    grid = ConformalGrid(Domain.box([[0, side], [0, side]]), side / 512)
    v = conformal_distance(grid, [0, 0], [side, side])
    assert abs(v - math.sqrt(2) * side) <= 0.01 * math.sqrt(2) * side


def test_conformal_homogeneity():
    dom = Domain.box([[0, 4], [0, 3]])
    rho = lambda p: 1.0 + 0.1 * p[:, 0] + 0.05 * np.sin(p[:, 1])
    g1 = ConformalGrid(dom, 0.1, rho)
    g2 = ConformalGrid(dom, 0.1, lambda p: 2 * rho(p))
    pts = np.array([[0.0, 0.0], [3.95, 2.7], [1.33, 0.41], [2.0, 3.0]])
    assert np.array_equal(2 * g1.pairwise(pts), g2.pairwise(pts))


def test_conformal_interface():
    dom = Domain.box([[0, 2], [0, 1]])
    rho = lambda p: np.where(p[:, 0] < 1.0, 1.0, 2.0)
    grid = ConformalGrid(dom, 1 / 64, rho)
    v = conformal_distance(grid, [0.25, 0.5], [1.75, 0.5])
    assert v == pytest.approx(0.75 + 2 * 0.75, abs=0.01)


def test_conformal_l_domain_goes_around_notch():
    ell = Domain.union([[[0, 2], [0, 1]], [[0, 1], [0, 2]]])
    grid = ConformalGrid(ell, 1 / 32, 1.0)
    v = conformal_distance(grid, [1.9, 0.5], [0.5, 1.9])
    want = 2 * math.hypot(0.9, 0.5)
    assert want - 1e-9 <= v <= want * (1 + stencil_anisotropy(2)) + 0.05


def test_conformal_outside_point():
    grid = ConformalGrid(Domain.box([[0, 1], [0, 1]]), 0.1)
    with pytest.raises(InvalidParameter):
        conformal_distance(grid, [0, 0], [2, 0])
    with pytest.raises(InvalidParameter):
        ConformalGrid(Domain.box([[0, 1], [0, 1]]), 0.1, -1.0)


def test_conformal_metric_axioms():
    g = np.random.default_rng(0)
    grid = ConformalGrid(Domain.box([[0, 5], [0, 5]]), 0.1, lambda p: 0.5 + 0.1 * p[:, 0])
    pts = g.uniform(0, 5, (12, 2))
    D = grid.pairwise(pts)
    assert np.allclose(D, D.T, atol=1e-12)
    # triangle holds up to the attachment error of off-lattice points
    for i in range(12):
        for j in range(12):
            for k in range(12):
                assert D[i, k] <= D[i, j] + D[j, k] + 2 * 0.0275 * D[i, k] + 1e-9


def test_constant_rho_scales_euclidean():
    eta = 0.6
    grid = ConformalGrid(Domain.box([[0, 10], [0, 10]]), 0.05, eta)
    g = np.random.default_rng(1)
    for _ in range(5):
        x, y = g.uniform(0, 10, 2), g.uniform(0, 10, 2)
        e = eta * float(np.linalg.norm(x - y))
        v = conformal_distance(grid, x, y)
        assert e - 1e-9 - 0.05 <= v <= e * (1 + stencil_anisotropy(2)) + 0.05
