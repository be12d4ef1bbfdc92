import itertools
import math

import numpy as np
import pytest

from services import polygon
from services.errors import InputError
from services.lv_flexibility import (
    DirectionWeights,
    FlexibilityArea,
    apply_worst_case_shift,
    build_direction_lp,
    intersect_areas,
    polygon_to_halfplanes,
    sweep_directions,
    sweep_flexibility_area,
)
from services.power_flow import InjectionSet, finite_diff_sensitivities, solve_bfs
from services.uncertainty import UncertaintyModel
from tests.conftest import build, line_feeder


@pytest.fixture
def lv_sens(lv_grid):
    return finite_diff_sensitivities(lv_grid, InjectionSet.from_model(lv_grid))


def single_der_grid(q_range=0.1, load=0.05, i_max=5.0):
    return build(line_feeder(
        2,
        i_max=i_max,
        ders=[{"bus": "1", "p_max": 0.2, "q_min": -q_range, "q_max": q_range, "curtailable_fraction": 1.0}],
        loads=[{"bus": "1", "p": load, "q": 0.0}],
    ))


def area_for(model, n_directions=8):
    sens = finite_diff_sensitivities(model, InjectionSet.from_model(model))
    return sweep_flexibility_area(model, sens, n_directions=n_directions)


def test_direction_weights():
    assert DirectionWeights.from_angle(0.0) == DirectionWeights(1.0, 0.0)
    assert DirectionWeights.from_angle(math.pi / 4) == DirectionWeights(1.0, 1.0)
    assert DirectionWeights.from_angle(math.pi) == DirectionWeights(-1.0, 0.0)
    assert DirectionWeights(0.0, -1.0).degrees == pytest.approx(270.0)
    with pytest.raises(InputError):
        DirectionWeights(0.0, 0.0)
    assert len(sweep_directions(8)) == 8


def test_no_flexible_resources_gives_point_area():
    model = build(line_feeder(3, loads=[{"bus": "2", "p": 0.1, "q": 0.02}]))
    area = area_for(model)
    assert len(area.vertices) == 1
    assert area.diagnostic == "no flexible resources"
    assert area.is_degenerate
    assert area.area == 0.0
    assert len(polygon_to_halfplanes(area)) == 4


def test_infeasible_base_collapses_to_point():
    model = single_der_grid(load=0.5, i_max=0.05)
    area = area_for(model)
    assert len(area.vertices) == 1
    assert "infeasible" in area.diagnostic


def test_support_points_are_feasible(lv_grid, lv_sens):
    base = lv_sens.base
    for direction in sweep_directions(8):
        problem = build_direction_lp(lv_grid, lv_sens, base, direction)
        assert problem.bus_ids == ("L2", "L3")
        assert not problem.base_violations
    area = sweep_flexibility_area(lv_grid, lv_sens)
    prog = build_direction_lp(lv_grid, lv_sens, base, DirectionWeights(1.0, 0.0)).program
    for support in area.supports:
        x = np.array([support.dp["L2"], support.dp["L3"], support.dq["L2"], support.dq["L3"]])
        assert np.all(prog.A_ub @ x <= prog.b_ub + 1e-7)
        assert np.all(x >= prog.lb - 1e-7) and np.all(x <= prog.ub + 1e-7)
        assert area.contains((support.p, support.q), tol=1e-9)
    assert area.contains(area.base)


def resolve(model, sens, dp, dq):
    """Power flow with injection changes keyed by bus."""
    columns = sens.injection_ids
    delta_p = np.array([dp.get(bus, 0.0) for bus in columns])
    delta_q = np.array([dq.get(bus, 0.0) for bus in columns])
    op = solve_bfs(model, InjectionSet.from_model(model).with_delta(delta_p, delta_q))
    assert op.converged
    return op


def worst_limit_violation(model, op):
    """Largest limit excess relative to the limit; zero or negative when within limits."""
    excess = [0.0]
    for bus_id, v in zip(op.bus_ids, op.v):
        if bus_id == model.slack.id:
            continue
        bus = model.bus(bus_id)
        excess += [(v - bus.v_max) / bus.v_max, (bus.v_min - v) / bus.v_min]
    for branch_id, i in zip(op.branch_ids, op.i):
        branch = model.branch(branch_id)
        excess.append((i - branch.i_max) / branch.i_max)
    return max(excess)


def test_area_matches_nonlinear_enumeration(lv_grid, lv_sens):
    area = sweep_flexibility_area(lv_grid, lv_sens)
    problem = build_direction_lp(lv_grid, lv_sens, lv_sens.base, DirectionWeights(1.0, 0.0))
    assert problem.program.names == ("dP[L2]", "dP[L3]", "dQ[L2]", "dQ[L3]")
    axes = [np.linspace(lo, hi, 9) for lo, hi in zip(problem.program.lb, problem.program.ub)]
    cloud = []
    for dp2, dp3, dq2, dq3 in itertools.product(*axes):
        op = resolve(lv_grid, lv_sens, {"L2": dp2, "L3": dp3}, {"L2": dq2, "L3": dq3})
        if worst_limit_violation(lv_grid, op) <= 0:
            cloud.append((op.p_slack, op.q_slack))
    hull = polygon.convex_hull(cloud)
    reachable = polygon.polygon_area(hull)
    assert reachable > 0
    common = polygon.polygon_area(polygon.intersect(hull, list(area.vertices)))
    assert common >= 0.98 * reachable
    assert area.area - common <= 0.02 * reachable


def test_support_setpoints_respect_limits_in_power_flow(lv_grid, lv_sens):
    area = sweep_flexibility_area(lv_grid, lv_sens)
    assert len(area.supports) == 8
    for support in area.supports:
        op = resolve(lv_grid, lv_sens, support.dp, support.dq)
        assert worst_limit_violation(lv_grid, op) <= 0.005, support.direction_deg


def test_linear_prediction_matches_power_flow(lv_grid, lv_sens):
    area = sweep_flexibility_area(lv_grid, lv_sens)
    p_span = max(p for p, _ in area.vertices) - min(p for p, _ in area.vertices)
    q_span = max(q for _, q in area.vertices) - min(q for _, q in area.vertices)
    # second-order losses stay within the 2% vertex tolerance of the enumeration check
    tol = 0.02 * max(p_span, q_span)
    for support in area.supports:
        op = resolve(lv_grid, lv_sens, support.dp, support.dq)
        assert abs(op.p_slack - support.p) <= tol, support.direction_deg
        assert abs(op.q_slack - support.q) <= tol, support.direction_deg


def test_more_directions_refine_the_area(lv_grid, lv_sens):
    coarse = sweep_flexibility_area(lv_grid, lv_sens, n_directions=8)
    fine = sweep_flexibility_area(lv_grid, lv_sens, n_directions=32)
    for vertex in coarse.vertices:
        assert fine.contains(vertex, tol=1e-9)
    assert coarse.area <= fine.area + 1e-12
    assert coarse.area >= 0.95 * fine.area


def test_too_few_directions(lv_grid, lv_sens):
    with pytest.raises(InputError):
        sweep_flexibility_area(lv_grid, lv_sens, n_directions=3)


def test_larger_capability_gives_larger_area():
    small = area_for(single_der_grid(q_range=0.05))
    large = area_for(single_der_grid(q_range=0.1))
    assert small.area > 0
    assert large.area > small.area
    for vertex in small.vertices:
        assert large.contains(vertex, tol=1e-7)


def test_curtailment_raises_import():
    area = area_for(single_der_grid())
    p_base = area.base[0]
    # full curtailment of 0.2 pu at the only bus
    assert max(p for p, _ in area.vertices) == pytest.approx(p_base + 0.2, rel=0.02)
    assert min(p for p, _ in area.vertices) == pytest.approx(p_base, abs=1e-3)


def uncertainty_for(model, level):
    ders = [d for d in model.ders]
    return UncertaintyModel(
        level=level,
        budget=1.0,
        node_ids=tuple(d.bus for d in ders),
        p_halfwidth=[d.p_halfwidth for d in ders],
        q_halfwidth=[d.q_halfwidth for d in ders],
    )


def test_worst_case_shift_identity_without_uncertainty(lv_grid, lv_sens):
    base = lv_sens.base
    assert apply_worst_case_shift(base, lv_sens, uncertainty_for(lv_grid, 0.0), 1) is base
    assert apply_worst_case_shift(base, lv_sens, uncertainty_for(lv_grid, 0.5), 0) is base


def test_worst_case_shift_moves_transfer(lv_grid, lv_sens):
    base = lv_sens.base
    unc = uncertainty_for(lv_grid, 0.5)
    upper = apply_worst_case_shift(base, lv_sens, unc, 1)
    lower = apply_worst_case_shift(base, lv_sens, unc, -1)
    # more PV output means less import
    assert upper.p_slack < base.p_slack < lower.p_slack
    # the budget of one goes entirely to the widest forecast, 10 kW at L2
    shift = lv_sens.k_sp[0, lv_sens.injection_ids.index("L2")] * 0.5 * 0.1
    assert upper.p_slack - base.p_slack == pytest.approx(shift, rel=1e-9)


def test_worst_case_shift_rejects_unmeasured_bus(lv_sens):
    unc = UncertaintyModel(level=0.5, budget=1.0, node_ids=("nowhere",), p_halfwidth=[0.1], q_halfwidth=[0.0])
    with pytest.raises(InputError, match="nowhere"):
        apply_worst_case_shift(lv_sens.base, lv_sens, unc, 1)


def test_intersection_of_shifted_areas(lv_grid, lv_sens):
    # a narrow forecast band keeps the shifted areas overlapping
    unc = uncertainty_for(lv_grid, 0.1)
    expected = sweep_flexibility_area(lv_grid, lv_sens)
    lower = sweep_flexibility_area(lv_grid, lv_sens, apply_worst_case_shift(lv_sens.base, lv_sens, unc, -1))
    upper = sweep_flexibility_area(lv_grid, lv_sens, apply_worst_case_shift(lv_sens.base, lv_sens, unc, 1))
    assert lower.base != upper.base
    common = intersect_areas(lower, upper)
    assert common is not None
    assert common.area > 0
    assert common.area <= min(lower.area, upper.area) + 1e-12
    for vertex in common.vertices:
        assert lower.contains(vertex, tol=1e-7)
        assert upper.contains(vertex, tol=1e-7)
        assert expected.contains(vertex, tol=1e-7)
    assert common.area <= expected.area + 1e-12


def test_disjoint_areas_do_not_intersect():
    first = FlexibilityArea.from_points([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], (0.0, 0.0))
    second = FlexibilityArea.from_points([(5.0, 5.0), (6.0, 5.0), (5.0, 6.0)], (5.0, 5.0))
    assert intersect_areas(first, second) is None


def test_rescaled_area():
    area = FlexibilityArea.from_points([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], (0.2, 0.2))
    scaled = area.rescaled(100.0)
    assert scaled.area == pytest.approx(100.0 ** 2 * area.area)
    assert scaled.contains((20.0, 20.0))
    assert not scaled.contains((60.0, 60.0))
    with pytest.raises(InputError):
        area.rescaled(0.0)
