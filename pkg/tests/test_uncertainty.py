import numpy as np
import pytest
from numpy.testing import assert_array_equal

from services.errors import InputError
from services.uncertainty import (
    UncertaintyModel,
    budget_dual_norm,
    is_admissible,
    sample_realizations,
    worst_case_realization,
)


def model(level=0.5, budget=1.5, hp=(0.1, 0.3, 0.2), hq=(0.0, 0.0, 0.0)):
    return UncertaintyModel(level=level, budget=budget, node_ids=("a", "b", "c"), p_halfwidth=hp, q_halfwidth=hq)


@pytest.mark.parametrize("budget,expected", [
    (0.0, 0.0),
    (0.5, 0.15),
    (1.0, 0.3),
    (1.5, 0.4),
    (3.0, 0.6),
    (10.0, 0.6),
])
def test_budget_dual_norm(budget, expected):
    assert budget_dual_norm([0.1, -0.3, 0.2], budget) == pytest.approx(expected)


def test_dual_norm_bounds_every_sample():
    values = np.array([0.1, -0.3, 0.2])
    unc = model()
    bound = budget_dual_norm(values, unc.budget)
    for w in sample_realizations(unc, 500, seed=11):
        assert w @ values <= bound + 1e-12


def test_worst_case_spends_budget_on_largest_weights():
    unc = model()
    assert_array_equal(worst_case_realization(unc, 1), [0.0, 1.0, 0.5])
    assert_array_equal(worst_case_realization(unc, -1), [0.0, -1.0, -0.5])
    assert_array_equal(worst_case_realization(unc, 0), [0.0, 0.0, 0.0])


def test_worst_case_attains_dual_norm():
    unc = model()
    weights = np.array([0.1, -0.3, 0.2])
    w = worst_case_realization(unc, 1, weights)
    assert is_admissible(w, unc.budget)
    assert w @ weights == pytest.approx(budget_dual_norm(weights, unc.budget))


def test_worst_case_ties_keep_node_order():
    unc = model(budget=1.0, hp=(0.2, 0.2, 0.2))
    assert_array_equal(worst_case_realization(unc, 1), [1.0, 0.0, 0.0])


def test_worst_case_rejects_bad_sign():
    with pytest.raises(InputError):
        worst_case_realization(model(), 2)


def test_samples_are_admissible_and_deterministic():
    unc = model(budget=1.0)
    first = sample_realizations(unc, 200, seed=3)
    assert first.shape == (200, 3)
    assert all(is_admissible(w, unc.budget) for w in first)
    assert_array_equal(first, sample_realizations(unc, 200, seed=3))


def test_admissibility():
    assert is_admissible([1.0, -0.5], 1.5)
    assert not is_admissible([1.1, 0.0], 2.0)
    assert not is_admissible([1.0, 1.0], 1.5)


def test_triviality_and_alignment():
    assert model(level=0.0).is_trivial
    assert model(budget=0.0).is_trivial
    assert not model().is_trivial
    hp, hq = model().halfwidths_for(["c", "x", "a"])
    assert_array_equal(hp, [0.2, 0.0, 0.1])
    assert_array_equal(hq, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("kwargs", [
    {"budget": -1.0},
    {"level": 1.5},
    {"level": float("nan")},
    {"hp": (0.1, -0.3, 0.2)},
    {"hp": (0.1, 0.3)},
])
def test_invalid_models(kwargs):
    with pytest.raises(InputError):
        model(**kwargs)
