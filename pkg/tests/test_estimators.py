import math
import random
import time

import numpy as np
import pytest

from defect_fpp import Box, Domain, InsufficientData, IntensityField, PointConfiguration, SimParams
from defect_fpp.estimators import (BudgetExceeded, ConfigError, EstimateRecord, ExperimentConfig,
                                   MonotonicityViolation, WeightFunction, _covered, _fsum_stats,
                                   cluster_tail, coupled_monotonicity, covered_integrals,
                                   distortion_experiment, estimate_eta, estimate_volume_fraction,
                                   geodesic_deviation, hausdorff_to_segment, interpolate_half,
                                   measure_experiment, rows_to_csv, run_replicas,
                                   stratified_probes, surjectivity_experiment, survival_fit,
                                   threshold_scan, vacancy_depth)
from defect_fpp.limits import EtaTable
from defect_fpp.metric import geodesic_xi0
from defect_fpp.sampler import RngStream
from oracles import union_area_inclusion_exclusion

P2 = SimParams(2, 0.0)


def test_eta_at_zero_is_exactly_one():
    res = estimate_eta(0.0, P2, [10, 40], 8, RngStream(1))
    for rec in res.records:
        assert rec.per_replica == [1.0] * 8
        assert rec.mean == 1.0 and rec.stderr == 0.0
    assert res.summary["eta"] == 1.0 and not res.summary["bound_violated"]


def test_eta_with_dilatation_at_zero():
    res = estimate_eta(0.0, SimParams(2, 0.5), [10], 3, RngStream(1))
    assert res.records[0].per_replica == pytest.approx([1.0] * 3, abs=1e-12)


def test_eta_supercritical_rejected():
    with pytest.raises(ConfigError) as exc:
        estimate_eta(0.9, P2, [10], 2, RngStream(1))
    assert exc.value.field == "u"


def test_eta_mean_nonincreasing_in_R():
    res = estimate_eta(0.2, P2, [25, 100], 20, RngStream(3))
    small, large = res.records
    se = math.hypot(small.stderr, large.stderr)
    assert large.mean <= small.mean + 3 * se
    assert 0 < large.mean <= res.summary["bound"] + 3 * large.stderr
    assert set(res.summary["fit"]) == {"a", "b"}


def test_volume_fraction_zero_intensity():
    res = estimate_volume_fraction(0.0, P2, 20, 3, RngStream(0), probes=1000)
    assert res.records[0].per_replica == [1.0, 1.0, 1.0]


def test_stratified_probes_one_per_cell():
    box = Box.from_bounds([[0, 10], [0, 10]])
    pts = stratified_probes(box, 400, np.random.default_rng(0))
    assert pts.shape == (400, 2)
    cells = np.floor(pts / 0.5).astype(int)
    assert len({tuple(c) for c in cells}) == 400


@pytest.mark.parametrize("seed", range(5))
def test_probe_area_matches_inclusion_exclusion(seed):
    g = np.random.default_rng(seed)
    c = g.uniform(2, 4, (5, 2))
    exact = union_area_inclusion_exclusion(c, 1.0)
    box = Box.from_bounds([[0, 6], [0, 6]])
    vals = []
    for k in range(20):
        pts = stratified_probes(box, 10_000, np.random.default_rng(1000 * seed + k))
        vals.append(_covered(c, 1.0, pts).mean() * 36.0)
    mean, se = _fsum_stats(vals)
    assert abs(mean - exact) <= 4 * se + 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_chord_integrals_match_inclusion_exclusion(seed):
    g = np.random.default_rng(seed)
    c = g.uniform(2, 4, (5, 2))
    exact = union_area_inclusion_exclusion(c, 1.0)
    dom = Domain.box([[0, 6], [0, 6]])
    (area,) = covered_integrals(PointConfiguration(c, 1.0), dom, 1.0,
                                [WeightFunction("one")], 0.001, np.array([0.5]))
    assert area == pytest.approx(exact, rel=1e-4)


def test_chord_integrals_respect_domain_and_scale():
    c = np.array([[10.0, 10.0]])
    dom_R = Domain.box([[0, 10], [0, 20]])
    (half,) = covered_integrals(PointConfiguration(c, 1.0), dom_R, 10.0,
                                [WeightFunction("one")], 0.001, np.array([0.5]))
    assert half == pytest.approx(math.pi / 2 / 100, rel=1e-4)


def test_weight_function_limits():
    dom = Domain.box([[0, 4], [0, 4]])
    assert WeightFunction.parse("bump", dom).width == 2.0
    with pytest.raises(ConfigError):
        WeightFunction.parse({"kind": "bump", "width": 0.5}, dom)
    with pytest.raises(ConfigError):
        WeightFunction.parse("wave", dom)
    ramp = WeightFunction.parse({"kind": "ramp", "axis": 1, "width": 2, "start": 1}, dom)
    assert np.allclose(ramp(np.array([[0, 0], [0, 2], [0, 5]])), [0, 0.5, 1])


def test_geodesic_deviation_zero_cases():
    res = geodesic_deviation(0.0, P2, [10, 20], 3, RngStream(0))
    assert all(v == 0.0 for r in res.records for v in r.per_replica)
    one = PointConfiguration(np.array([[5.0, 0.0]]), 1.0)
    x, y = np.array([0.0, 0.0]), np.array([10.0, 0.0])
    assert hausdorff_to_segment(geodesic_xi0(one, None, x, y).geodesic, x, y) == 0.0


def test_hausdorff_to_segment_vertex():
    poly = np.array([[0, 0], [2, 1.5], [4, 0]], dtype=float)
    assert hausdorff_to_segment(poly, poly[0], poly[-1]) == 1.5


def test_cluster_tail_zero_and_minimum_diameter():
    with pytest.raises(InsufficientData):
        cluster_tail(0.0, P2, 20, 2, RngStream(0))
    res = cluster_tail(0.1, P2, 40, 4, RngStream(0), band=(1e-3, 0.99))
    t, surv = np.array(res.summary["t"]), np.array(res.summary["survival"])
    assert t.min() == pytest.approx(2.0)
    assert surv[0] < 1.0


def test_survival_fit_on_exponential():
    g = np.random.default_rng(0)
    fit = survival_fit(2 + g.exponential(1.0, 200_000))
    assert fit["slope"] == pytest.approx(-1.0, abs=0.05) and fit["r2"] > 0.98


def test_threshold_zero_and_extremes():
    res = threshold_scan([0.0, 0.1, 0.6], P2, [60], 500, RngStream(4))
    p = res.summary["table"]["60"]["p"]
    assert p[0] == 0.0 and p[1] < 0.05 and p[2] > 0.95
    assert p == sorted(p)


def test_interpolate_half():
    assert interpolate_half([0.1, 0.2, 0.3], [0.0, 0.25, 0.75]) == pytest.approx(0.25)
    assert math.isnan(interpolate_half([0.1, 0.2], [0.0, 0.1]))


def test_coupled_equal_levels_and_zero_low():
    res = coupled_monotonicity(0.2, 0.2, P2, 30, 5, RngStream(0))
    assert all(r["dist_low"] == r["dist_high"] for r in res.rows)
    res = coupled_monotonicity(0.0, 0.2, P2, 30, 5, RngStream(0))
    assert all(r["dist_high"] <= 30.0 and r["dist_low"] == 30.0 for r in res.rows)


def test_coupled_violation_is_hard_failure():
    # a negative tolerance turns equality into a reported violation
    with pytest.raises(MonotonicityViolation):
        coupled_monotonicity(0.1, 0.1, P2, 20, 2, RngStream(0), tol=-1.0)


def test_measure_and_volume_agree_for_constant_one():
    dom = Domain.box([[0, 1], [0, 1]])
    fld = IntensityField.constant(0.2)
    m = measure_experiment(fld, dom, P2, [50], ["one"], 20, RngStream(5), quadrature=10)
    v = estimate_volume_fraction(0.2, P2, 50, 20, RngStream(6), probes=40_000)
    nu = m.record("measure_abs_diff", R=50.0, f="one")
    vals = [r["nu_one_50"] for r in m.rows]
    mean, se = _fsum_stats(vals)
    vr = v.records[0]
    assert abs(mean - vr.mean) <= 3 * math.hypot(se, vr.stderr)
    assert m.summary["target"]["one"] == pytest.approx(math.exp(-0.2 * math.pi), abs=1e-12)
    assert nu.n == 20


def test_measure_zero_intensity():
    dom = Domain.box([[0, 2], [0, 2]])
    m = measure_experiment(IntensityField.constant(0.0), dom, P2, [10], ["one", "bump"], 2,
                           RngStream(0), quadrature=50)
    for r in m.rows:
        assert r["abs_diff_one_10"] == 0.0
        assert r["nu_bump_10"] == pytest.approx(r["mu_bump_10"], abs=1e-12)


def test_surjectivity_zero_and_single_ball():
    dom = Domain.box([[0, 1], [0, 1]])
    res = surjectivity_experiment(dom, IntensityField.constant(0.0), P2, [10], 0.1, 2, RngStream(0))
    assert [r["hausdorff_10"] for r in res.rows] == [0.0, 0.0]
    R = 10.0
    cfg = PointConfiguration(np.array([[5.0, 5.0]]), 1.0)
    probes = np.vstack([np.stack(np.meshgrid(np.arange(11.0), np.arange(11.0)), -1).reshape(-1, 2),
                        cfg.centers])
    depth, exact = vacancy_depth(cfg, probes)
    assert exact and depth.max() / R <= 1.0 / R


def test_surjectivity_trend_small():
    dom = Domain.box([[0, 4], [0, 4]])
    fld = IntensityField.constant(0.2)
    res = surjectivity_experiment(dom, fld, P2, [5, 40], None, 4, RngStream(2))
    a, b = res.records
    assert b.mean < a.mean


def test_distortion_zero_intensity_is_grid_error():
    dom = Domain.box([[0, 4], [0, 4]])
    table = EtaTable(2, 0.0, [0.0], [1.0], [0.0])
    res = distortion_experiment(IntensityField.constant(0.0), dom, P2, [5], 2.0, table, 2,
                                RngStream(0), grid_h=0.02)
    for r in res.rows:
        assert r["sup_distortion_5"] <= 0.01 * dom.diameter


def test_distortion_table_range_checked():
    dom = Domain.box([[0, 4], [0, 4]])
    table = EtaTable(2, 0.0, [0.0, 0.1], [1.0, 0.8], [0.0, 0.01])
    with pytest.raises(ConfigError) as exc:
        distortion_experiment(IntensityField.constant(0.2), dom, P2, [5], 2.0, table, 1,
                              RngStream(0))
    assert exc.value.field == "table"


def _square(p, k, stream):
    return {"value": float(k * k), "draw": float(stream.generator().random())}


def _slow(p, k, stream):
    time.sleep(0.2)
    if p.get("deadline") is not None and time.time() > p["deadline"]:
        raise BudgetExceeded("late")
    return {"value": float(k)}


def test_run_replicas_jobs_invariant():
    a, _ = run_replicas(_square, {}, 6, RngStream(9), jobs=1)
    b, _ = run_replicas(_square, {}, 6, RngStream(9), jobs=2)
    assert a == b and [r["replica"] for r in a] == list(range(6))
    assert rows_to_csv(a) == rows_to_csv(b)


def test_run_replicas_budget_stops_early():
    rows, stopped = run_replicas(_slow, {}, 50, RngStream(0), budget=0.5)
    assert stopped and 1 <= len(rows) < 50
    assert [r["replica"] for r in rows] == list(range(len(rows)))


def test_fsum_stats_order_invariant():
    g = np.random.default_rng(0)
    vals = (g.standard_normal(1000) * 10 ** g.uniform(-5, 5, 1000)).tolist()
    m0, s0 = _fsum_stats(vals)
    for seed in range(5):
        random.Random(seed).shuffle(vals)
        m1, s1 = _fsum_stats(vals)
        assert m1 == m0 and abs(s1 - s0) <= 1e-12 * abs(s0)


def test_record_json():
    rec = EstimateRecord.from_values("x", {"u": 0.1}, [1.0, 2.0, 3.0], 7)
    doc = rec.to_json()
    assert doc["mean"] == 2.0 and doc["stderr"] == pytest.approx(1 / math.sqrt(3))
    assert doc["quantiles"]["q50"] == 2.0 and doc["n"] == 3
    assert EstimateRecord.from_values("x", {}, [1.0], 7).to_json()["stderr"] is None


BASE = {"kind": "volume", "u": 0.2, "replicas": 2}


@pytest.mark.parametrize("patch,field", [
    ({"kind": "nonsense"}, "kind"),
    ({"replicas": 0}, "replicas"),
    ({"u": 0.9}, "u"),
    ({"u": "lots"}, "u"),
    ({"xi": 1.5}, "xi"),
    ({"d": 1}, "d"),
    ({"box_side": -1}, "box_side"),
    ({"colour": "red"}, "colour"),
    ({"schema": 2}, "schema"),
    ({"kind": "measure", "domain": {"box": [[0, 1], [0, 1], [0, 1]]}, "R_list": [5]}, "domain"),
    ({"kind": "measure", "domain": {"box": [[0, 4], [0, 4]]}, "R_list": [5],
      "test_functions": [{"kind": "bump", "width": 0.1}]}, "test_functions"),
    ({"kind": "distortion", "domain": {"box": [[0, 40], [0, 40]]}, "R_list": [5],
      "net_spacing": 1.0}, "net_spacing"),
    ({"kind": "eta"}, "R_list"),
    ({"kind": "monotonicity", "u_low": 0.3, "u_high": 0.2}, "u_low"),
    ({"kind": "threshold", "u_grid": [-0.1]}, "u_grid"),
    ({"kind": "geodesic", "xi": 0.5}, "xi"),
    ({"kind": "measure", "R_list": [5], "domain": {"box": [[0, 4], [0, 4]]},
      "intensity": {"grid": {"origin": [0, 0], "spacing": 1, "values": [[0, 0], [0, 0]]}}},
     "intensity"),
])
def test_config_errors_name_field(patch, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_json({**BASE, **patch})
    assert exc.value.field == field
    assert str(exc.value).startswith(field + ":")


def test_config_accepts_aliases_and_defaults():
    cfg = ExperimentConfig.from_json({"kind": "estimate_volume_fraction", "u": 0.2})
    assert cfg.kind == "volume" and cfg.options["box_side"] == 50.0
    cfg = ExperimentConfig.from_json({"kind": "volume", "u": 0.9, "allow_supercritical": True})
    assert cfg.u == 0.9
