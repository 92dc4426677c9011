import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncfed.core import UnsupportedConfigError
from asyncfed.timing import HardwareModel, PolicyKind, WaitPolicy, simulate_schedule
from asyncfed.weights import (
    WeightScheme,
    chi_square_bias,
    plan_weights,
    verify_window_assumption,
    window_size,
)

ASYNC = WaitPolicy(PolicyKind.ASYNCHRONOUS)
SYNC = WaitPolicy(PolicyKind.SYNCHRONOUS)


def realized_weights(taus, policy, d, n_rounds):
    """Per-round expected weights of a deterministic schedule."""
    schedule = simulate_schedule(taus, policy, n_rounds)
    out = np.zeros((n_rounds, len(taus)))
    for row, outcome in zip(out, schedule):
        for part in outcome.participants:
            row[part.client_id] = part.multiplicity * d[part.client_id]
    return out


class TestPlanWeights:
    def test_async_time_based_close_form(self):
        plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, [0.5, 0.5], [1, 2], ASYNC)
        assert plan.d.tolist() == [0.75, 1.5]

    def test_fedfix_time_based_close_form(self):
        policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=2)
        plan = plan_weights(
            WeightScheme.FEDFIX_TIME_BASED, [0.25] * 4, [3, 3, 3, 3], policy
        )
        assert plan.d.tolist() == [0.5] * 4

    def test_fedavg_weights_are_the_importances(self):
        plan = plan_weights(WeightScheme.FEDAVG, [0.2, 0.3, 0.5], [1, 2, 3], ASYNC)
        assert plan.d.tolist() == [0.2, 0.3, 0.5]

    def test_identical_weights(self):
        plan = plan_weights(WeightScheme.IDENTICAL, [0.5, 0.5], [1, 2], ASYNC)
        assert plan.d.tolist() == [1.0, 1.0]

    def test_time_based_rejects_random_hardware(self):
        with pytest.raises(UnsupportedConfigError):
            plan_weights(
                WeightScheme.ASYNC_TIME_BASED, [0.5, 0.5], [1, 2], ASYNC,
                hw=HardwareModel("exponential"),
            )

    def test_scale_invariance_in_time_units(self):
        base = plan_weights(WeightScheme.ASYNC_TIME_BASED, [0.5, 0.5], [1, 2], ASYNC)
        for factor in (2, 3, Fraction(1, 4), 7):
            scaled = plan_weights(
                WeightScheme.ASYNC_TIME_BASED,
                [0.5, 0.5],
                [Fraction(t) * factor for t in (1, 2)],
                ASYNC,
            )
            assert scaled.d.tolist() == base.d.tolist()

    def test_fedfix_wide_window_degenerates_to_importances(self):
        policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=3)
        plan = plan_weights(WeightScheme.FEDFIX_TIME_BASED, [0.3, 0.7], [1, 3], policy)
        assert plan.d.tolist() == [0.3, 0.7]

    def test_custom_table(self):
        plan = plan_weights(
            WeightScheme.CUSTOM, [0.5, 0.5], [2, 2], SYNC, custom_d=[0.3, 0.6]
        )
        assert plan.d.tolist() == [0.3, 0.6]


class TestWindowSize:
    def test_async_sum_of_cycle_counts(self):
        assert window_size(ASYNC, [1, 2, 3]) == 11

    def test_synchronous_is_one(self):
        assert window_size(SYNC, [1, 2, 3]) == 1

    def test_fedfix_lcm_of_ceilinged_periods(self):
        policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=2)
        assert window_size(policy, [1, 2, 3]) == 2

    def test_sampling_is_one(self):
        policy = WaitPolicy(PolicyKind.SAMPLE_UNIFORM, m=2)
        assert window_size(policy, [1, 2, 3]) == 1


class TestWindowAssumption:
    def test_async_time_based_satisfies_the_window_condition(self):
        p = [0.5, 0.5]
        plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, p, [1, 2], ASYNC)
        q = realized_weights([1, 2], ASYNC, plan.d, 2 * plan.window)
        report = verify_window_assumption(q, plan.window, p, tol=1e-12)
        assert report.satisfied
        assert report.n_windows == 2
        assert not report.truncated

    def test_identical_weights_fail_on_heterogeneous_hardware(self):
        p = [0.5, 0.5]
        plan = plan_weights(WeightScheme.IDENTICAL, p, [1, 2], ASYNC)
        q = realized_weights([1, 2], ASYNC, plan.d, 2 * plan.window)
        report = verify_window_assumption(q, plan.window, p)
        assert not report.satisfied
        # fast client lands 2 of every 3 rounds with unit weight
        assert report.max_deviation == pytest.approx(2 / 3 - 0.5, abs=1e-12)

    def test_synchronous_importance_weights_have_zero_deviation(self):
        p = [0.3, 0.7]
        plan = plan_weights(WeightScheme.FEDAVG, p, [1, 2], SYNC)
        q = realized_weights([1, 2], SYNC, plan.d, 4)
        report = verify_window_assumption(q, 1, p, tol=1e-15)
        assert report.satisfied
        assert report.max_deviation == 0.0

    def test_incomplete_tail_is_flagged(self):
        p = [0.5, 0.5]
        plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, p, [1, 2], ASYNC)
        q = realized_weights([1, 2], ASYNC, plan.d, plan.window + 1)
        report = verify_window_assumption(q, plan.window, p)
        assert report.truncated and report.n_windows == 1

    def test_window_averages_match_the_plan(self):
        p = [0.25, 0.25, 0.5]
        plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, p, [2, 3, 4], ASYNC)
        q = realized_weights([2, 3, 4], ASYNC, plan.d, plan.window)
        assert np.allclose(q.mean(axis=0), plan.q_over_window, atol=1e-15)


class TestChiSquare:
    def test_matching_vectors_give_zero(self):
        out = chi_square_bias([0.5, 0.5], [0.5, 0.5])
        assert out.value == 0.0 and not out.unrepresented

    def test_hand_computed_divergence(self):
        out = chi_square_bias([0.5, 0.5], [0.75, 0.25])
        assert out.value == pytest.approx(1 / 3, abs=1e-15)

    def test_unrepresented_distribution_is_flagged(self):
        out = chi_square_bias([0.5, 0.5], [1.0, 0.0])
        assert out.unrepresented and math.isinf(out.value)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_with_equality_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.dirichlet(np.ones(4))
        s = rng.dirichlet(np.ones(4))
        out = chi_square_bias(r, s)
        assert out.value >= 0.0
        if out.value == 0.0:
            assert np.allclose(r, s)


class TestWindowIdentity:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_async_window_average_recovers_importances(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 5))
        taus = [int(t) for t in rng.integers(1, 7, size=m)]
        p = rng.dirichlet(np.ones(m)).tolist()
        plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, p, taus, ASYNC)
        q_tilde = plan.q_over_window / plan.q_over_window.sum()
        assert np.max(np.abs(q_tilde - np.asarray(p))) < 1e-12
