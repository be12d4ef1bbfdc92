import io

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from services.errors import InputError, MeasurementError
from services.power_flow import InjectionSet, finite_diff_sensitivities, solve_bfs
from services.sensitivity import (
    MeasurementSeries,
    estimate_from_measurements,
    measurements_to_csv,
    parse_measurements,
    predict_state,
    read_measurements_csv,
    simulate_measurements,
)


def two_bus_load(model):
    return InjectionSet(bus_ids=model.non_slack_ids, p=np.array([-0.1]), q=np.array([-0.02]))


def within_tolerance(estimated, oracle, rel=0.05, abs_tol=1e-4):
    return np.all(np.abs(estimated - oracle) <= np.maximum(rel * np.abs(oracle), abs_tol))


def test_two_bus_estimate_matches_finite_differences(two_bus):
    inj = two_bus_load(two_bus)
    series = simulate_measurements(two_bus, inj, samples=200, sigma=0.01, seed=1)
    sens = estimate_from_measurements(series)
    oracle = finite_diff_sensitivities(two_bus, inj)
    assert sens.coefficient("k_vp", "1", "1") == pytest.approx(oracle.coefficient("k_vp", "1", "1"), rel=0.05)
    assert sens.coefficient("k_vq", "1", "1") == pytest.approx(oracle.coefficient("k_vq", "1", "1"), rel=0.05)


def test_lv_estimate_matches_finite_differences(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    sens = estimate_from_measurements(simulate_measurements(lv_grid, inj, samples=200, sigma=0.01, seed=3))
    oracle = finite_diff_sensitivities(lv_grid, inj)
    assert sens.injection_ids == oracle.injection_ids
    for name in ("k_vp", "k_vq", "k_ip", "k_iq", "k_sp", "k_sq"):
        assert within_tolerance(getattr(sens, name), getattr(oracle, name)), name


def test_higher_order_terms_absorb_curvature(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    series = simulate_measurements(lv_grid, inj, samples=200, sigma=0.01, seed=3)
    oracle = finite_diff_sensitivities(lv_grid, inj)

    def worst(sens):
        return max(np.max(np.abs(getattr(sens, name) - getattr(oracle, name))) for name in ("k_ip", "k_iq"))

    assert worst(estimate_from_measurements(series)) < worst(estimate_from_measurements(series, degree=1))


def test_fit_degree_follows_sample_count(lv_grid, caplog):
    inj = InjectionSet.from_model(lv_grid)
    series = simulate_measurements(lv_grid, inj, samples=30, seed=8)
    with caplog.at_level("WARNING", logger="services.sensitivity"):
        sens = estimate_from_measurements(series, degree=3)
    assert "fit degree 1" in caplog.text
    assert sens.k_vp.shape == (len(sens.bus_ids), 3)
    with pytest.raises(InputError, match="degree"):
        estimate_from_measurements(series, degree=0)


def test_estimate_base_is_latest_sample(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    series = simulate_measurements(lv_grid, inj, samples=50, seed=2)
    sens = estimate_from_measurements(series)
    nominal = solve_bfs(lv_grid, inj)
    assert_allclose(sens.base.v, nominal.v)
    assert sens.base.p_slack == pytest.approx(nominal.p_slack)
    assert set(sens.residuals) >= {"v:L3", "i:L2-L3", "p_slack", "q_slack"}


def test_simulation_is_deterministic(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    first = simulate_measurements(lv_grid, inj, samples=20, seed=5)
    second = simulate_measurements(lv_grid, inj, samples=20, seed=5)
    pd.testing.assert_frame_equal(first.v, second.v)
    pd.testing.assert_frame_equal(first.p, second.p)


def constant_series(samples=30):
    index = pd.date_range("2024-01-01", periods=samples, freq="10min")
    ones = pd.DataFrame({"0": 1.0, "1": 0.99}, index=index)
    p = pd.DataFrame({"0": 0.1, "1": -0.1}, index=index)
    q = pd.DataFrame({"0": 0.0, "1": 0.0}, index=index)
    i = pd.DataFrame({"0-1": 0.1}, index=index)
    return MeasurementSeries(v=ones, p=p, q=q, i=i, slack_id="0")


def test_constant_series_is_rank_deficient():
    with pytest.raises(MeasurementError, match="zero variance"):
        estimate_from_measurements(constant_series())


def test_short_window(two_bus):
    series = simulate_measurements(two_bus, two_bus_load(two_bus), samples=50)
    with pytest.raises(MeasurementError, match="insufficient samples"):
        estimate_from_measurements(series, window=1)


def test_collinear_injections_need_ridge(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    series = simulate_measurements(lv_grid, inj, samples=40, seed=4)
    # q at L2 moves in lockstep with p at L2
    q = series.q.copy()
    q["L2"] = series.p["L2"] * 0.5
    collinear = MeasurementSeries(v=series.v, p=series.p, q=q, i=series.i, slack_id=series.slack_id)
    with pytest.raises(MeasurementError, match="ridge > 0"):
        estimate_from_measurements(collinear, ridge=0.0)
    estimate_from_measurements(collinear, ridge=1e-6)


def test_irregular_timestamps_are_rejected():
    series = constant_series(5)
    index = series.v.index.delete(2)
    frames = {name: getattr(series, name).loc[index] for name in ("v", "p", "q", "i")}
    with pytest.raises(MeasurementError, match="10-minute"):
        MeasurementSeries(slack_id="0", **frames)
    MeasurementSeries(slack_id="0", allow_gaps=True, **frames)


def test_missing_transfer_column():
    series = constant_series(5)
    with pytest.raises(MeasurementError, match="slack bus"):
        MeasurementSeries(v=series.v, p=series.p.drop(columns="0"), q=series.q, i=series.i, slack_id="0")


def test_csv_round_trip(lv_grid, tmp_path):
    inj = InjectionSet.from_model(lv_grid)
    series = simulate_measurements(lv_grid, inj, samples=30, seed=6)
    text = measurements_to_csv(series)
    assert text.splitlines()[0] == "timestamp,element_id,kind,value_pu"
    path = tmp_path / "measurements.csv"
    path.write_text(text, encoding="utf-8")
    restored = read_measurements_csv(path, slack_id="L0")
    assert_array_equal(restored.v[list(series.v.columns)].to_numpy(), series.v.to_numpy())
    assert_array_equal(restored.p[list(series.p.columns)].to_numpy(), series.p.to_numpy())


def test_unknown_kind_in_table():
    table = pd.read_csv(io.StringIO("timestamp,element_id,kind,value_pu\n2024-01-01T00:00:00,1,x,0.1\n"))
    with pytest.raises(MeasurementError, match="unknown measurement kinds"):
        parse_measurements(table, slack_id="0")


def test_predict_zero_delta_is_base(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    sens = finite_diff_sensitivities(lv_grid, inj)
    state = predict_state(sens, sens.base, np.zeros(3), np.zeros(3))
    assert_array_equal(state.v, sens.base.v)
    assert_array_equal(state.i, sens.base.i)
    assert state.p_slack == sens.base.p_slack


def test_predict_is_linear(lv_grid):
    sens = finite_diff_sensitivities(lv_grid, InjectionSet.from_model(lv_grid))
    dp = np.array([0.01, -0.02, 0.03])
    dq = np.array([0.0, 0.01, -0.01])
    once = predict_state(sens, sens.base, dp, dq)
    twice = predict_state(sens, sens.base, 2 * dp, 2 * dq)
    assert_allclose(twice.v - sens.base.v, 2 * (once.v - sens.base.v), rtol=1e-12, atol=1e-15)


def test_predict_matches_nonlinear_resolve(two_bus):
    inj = two_bus_load(two_bus)
    sens = finite_diff_sensitivities(two_bus, inj)
    state = predict_state(sens, sens.base, [0.01], [0.0])
    resolved = solve_bfs(two_bus, inj.with_delta([0.01], [0.0]))
    assert state.v[1] == pytest.approx(resolved.v[1], abs=1e-4)


def test_prediction_error_is_second_order(lv_grid):
    inj = InjectionSet.from_model(lv_grid)
    sens = finite_diff_sensitivities(lv_grid, inj)

    def error(size):
        dp = np.array([0.0, 0.0, -size])
        state = predict_state(sens, sens.base, dp, np.zeros(3))
        return np.max(np.abs(state.v - solve_bfs(lv_grid, inj.with_delta(dp, np.zeros(3))).v))

    assert error(0.1) / error(0.2) <= 0.3


def test_predict_shape_mismatch(lv_grid):
    sens = finite_diff_sensitivities(lv_grid, InjectionSet.from_model(lv_grid))
    with pytest.raises(InputError):
        predict_state(sens, sens.base, np.zeros(2), np.zeros(3))
