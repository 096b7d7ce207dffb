import math

import numpy as np
import pytest

from defect_fpp import (Box, Domain, IntensityField, InvalidParameter, OutOfDomain,
                        PointConfiguration, SimParams, domain_contains, eval_intensity, kappa)


@pytest.mark.parametrize("d,expected", [(1, 2.0), (2, math.pi), (3, 4 * math.pi / 3)])
def test_kappa_values(d, expected):
    assert kappa(d) == pytest.approx(expected, rel=1e-15)


def test_kappa_rejects_zero_dimension():
    with pytest.raises(InvalidParameter):
        kappa(0)


def test_simparams_validation():
    SimParams(2, 0.5, 10.0)
    for bad in [dict(d=1), dict(xi=1.0), dict(xi=-0.1), dict(R=0.0)]:
        with pytest.raises(InvalidParameter):
            SimParams(**bad)


def test_rescaling_roundtrip():
    sp = SimParams(2, 0.0, 25.0)
    x = np.array([0.3, 1.7])
    assert np.allclose(sp.to_unscaled(sp.to_rescaled(x)), x)


def test_unit_square_membership():
    sq = Domain.box([[0, 1], [0, 1]])
    assert domain_contains(sq, (0.5, 0.5))
    assert domain_contains(sq, (1.0, 1.0))
    assert not domain_contains(sq, (1.0 + 1e-9, 0.5))


def test_membership_dimension_mismatch():
    with pytest.raises(InvalidParameter):
        domain_contains(Domain.box([[0, 1], [0, 1]]), (0.5, 0.5, 0.5))


def test_polytope_triangle():
    tri = Domain.polytope([[-1, 0], [0, -1], [1, 1]], [0, 0, 1])
    assert tri.is_convex
    assert tri.volume == pytest.approx(0.5)
    assert tri.diameter == pytest.approx(math.sqrt(2))
    assert tri.contains([0.2, 0.2]) and not tri.contains([0.8, 0.8])


def test_polytope_rejects_unbounded_and_empty():
    with pytest.raises(InvalidParameter):
        Domain.polytope([[-1, 0], [0, -1]], [0, 0])
    with pytest.raises(InvalidParameter):
        Domain.polytope([[1, 0], [-1, 0], [0, 1], [0, -1]], [0, 0, 1, 1])


def test_l_shaped_union():
    ell = Domain.union([[[0, 2], [0, 1]], [[0, 1], [0, 2]]])
    assert not ell.is_convex
    assert ell.volume == pytest.approx(3.0)
    assert ell.segment_inside([0.5, 1.5], [1.5, 0.5]) is False or \
        not ell.segment_inside([0.5, 1.9], [1.9, 0.5])
    assert ell.segment_inside([0.5, 1.5], [0.5, 0.5])
    corners = ell.reflex_corners()
    assert np.allclose(corners, [[1.0, 1.0]])


def test_domain_scaled_and_json_roundtrip():
    for dom in [Domain.box([[0, 2], [0, 1]]),
                Domain.union([[[0, 2], [0, 1]], [[0, 1], [0, 2]]]),
                Domain.polytope([[-1, 0], [0, -1], [1, 1]], [0, 0, 1])]:
        back = Domain.from_json(dom.to_json())
        assert back.kind == dom.kind
        assert back.volume == pytest.approx(dom.volume)
        assert dom.scaled(3.0).volume == pytest.approx(9.0 * dom.volume)


def test_constant_intensity():
    f = IntensityField.constant(0.2)
    assert eval_intensity(f, [3.0, -7.0]) == 0.2


def test_linear_midpoint_1d():
    f = IntensityField.grid([0.0], [1.0], [0.0, 0.2])
    assert eval_intensity(f, [0.5]) == pytest.approx(0.1, abs=1e-15)


def test_grid_node_is_exact():
    vals = np.array([[0.01, 0.07, 0.03], [0.11, 0.05, 0.13]])
    f = IntensityField.grid([1.0, 2.0], [0.5, 0.25], vals)
    assert eval_intensity(f, [1.5, 2.25]) == vals[1, 1]


def test_grid_outside_is_error():
    f = IntensityField.grid([0.0, 0.0], 1.0, [[0.1, 0.1], [0.1, 0.1]])
    with pytest.raises(OutOfDomain):
        eval_intensity(f, [2.0, 0.5])


def test_supercritical_field_rejected_or_warned():
    with pytest.raises(InvalidParameter):
        IntensityField.constant(0.5, u_star=0.35)
    with pytest.warns(UserWarning):
        IntensityField.constant(0.5, u_star=0.35, allow_supercritical=True)


def test_linear_field_and_rescaling():
    box = Box.from_bounds([[0, 40], [0, 40]])
    f = IntensityField.linear(box, 0, 0.05, 0.2)
    assert f(np.array([20.0, 7.0])) == pytest.approx(0.125)
    g = f.rescaled(25.0)
    assert g(np.array([500.0, 3.0])) == pytest.approx(0.125)
    assert f.lipschitz_bound == pytest.approx(0.15 / 40)


def test_point_configuration_validation():
    with pytest.raises(InvalidParameter):
        PointConfiguration(np.array([[0.0, np.nan]]))
    with pytest.raises(InvalidParameter):
        PointConfiguration(np.zeros((1, 2)), radius=0.0)
    cfg = PointConfiguration.empty(3).with_ball([1, 2, 3])
    assert len(cfg) == 1 and cfg.d == 3
