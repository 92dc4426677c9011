"""Acceptance suite: one test per exit criterion, each printing a PASS line
with its measured margin. Tolerances are fixed here, not tuned at runtime.
"""

import itertools
import math
import time

import numpy as np
import pytest

from asyncfed.bounds import BoundInputs, epsilon_terms, exponent_check, fill_inputs, lr_constraint, scheme_presets
from asyncfed.core import ClientSpec, Fleet
from asyncfed.engine import (
    RunConfig,
    ScalarEnsembleConfig,
    Seeds,
    final_window_loss,
    run,
    run_scalar_ensemble,
)
from asyncfed.cli import sweep_rows
from asyncfed.objectives import GlmObjective, QuadraticObjective, SyntheticShardConfig, make_synthetic_shards
from asyncfed.oracle import OracleState, expectation_recursion, expected_round_time, phi, staleness_law, variance_recursion
from asyncfed.timing import HardwareModel, PolicyKind, WaitPolicy, simulate_round_times, simulate_schedule
from asyncfed.weights import WeightScheme, plan_weights, verify_window_assumption

from conftest import quadratic_fleet


def report(number: int, message: str) -> None:
    print(f"[acceptance] criterion {number:2d}: PASS  {message}")


class TestCriterion1SynchronousContraction:
    def test_gap_follows_the_closed_form(self):
        fleet = quadratic_fleet([[0.0, 1.0], [2.0, -1.0], [4.0, 3.0]], taus=[1, 2, 3])
        plan = plan_weights(
            WeightScheme.FEDAVG, fleet.importances, fleet.compute_times,
            WaitPolicy(PolicyKind.SYNCHRONOUS),
        )
        # contraction slow enough that the predicted gap stays well inside
        # double-precision range over all 100 rounds
        cfg = RunConfig(
            fleet=fleet, policy=WaitPolicy(PolicyKind.SYNCHRONOUS), plan=plan,
            eta_g=1.0, eta_l=0.05, k_steps=2, full_gradient=True, rounds=100,
            theta0=np.array([10.0, -7.0]),
        )
        started = time.perf_counter()
        traj = run(cfg)
        elapsed = time.perf_counter() - started

        contraction = 1.0 - phi(0.05, 2)
        gaps = np.linalg.norm(traj.theta - traj.optimum, axis=1)
        worst = 0.0
        for n in range(101):
            expected = gaps[0] * contraction ** n
            worst = max(worst, abs(gaps[n] - expected) / expected)
        assert worst < 1e-10
        assert elapsed < 1.0
        report(1, f"max relative gap error {worst:.2e} over 100 rounds in {elapsed:.3f}s")


class TestCriterion2AlternatingPairsRecursion:
    def test_second_order_recursion_and_convergence(self):
        # two data types with optima 0 and 2, two clients per type, pairs
        # alternating rounds; every round sees both types with weight 1/2
        fleet = quadratic_fleet(
            [[0.0], [0.0], [2.0], [2.0]], taus=[2, 2, 2, 2],
            distribution_ids=[0, 0, 1, 1],
        )
        policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=1)
        plan = plan_weights(
            WeightScheme.FEDFIX_TIME_BASED, fleet.importances, fleet.compute_times, policy
        )
        assert plan.d.tolist() == [0.5, 0.5, 0.5, 0.5]
        cfg = RunConfig(
            fleet=fleet, policy=policy, plan=plan, eta_g=1.0, eta_l=0.5, k_steps=1,
            full_gradient=True, rounds=502, theta0=np.array([5.0]),
            initial_clocks=(2, 1, 2, 1),
        )
        traj = run(cfg)
        pattern = [out.participant_ids for out in traj.rounds[:4]]
        assert pattern == [(1, 3), (0, 2), (1, 3), (0, 2)]

        theta = traj.theta[:, 0]
        contraction = phi(0.5, 1)
        residuals = np.abs(theta[2:] - theta[1:-1] + contraction * theta[:-2] - contraction * 1.0)
        assert residuals.max() < 1e-10
        assert abs(theta[500] - 1.0) < 1e-8
        report(
            2,
            f"recursion residual max {residuals.max():.2e}, "
            f"|theta_500 - optimum| = {abs(theta[500] - 1.0):.2e}",
        )


class TestCriterion3AlternatingBiasAndRepair:
    @staticmethod
    def _run_alternating(custom_d=None, scheme=WeightScheme.CUSTOM):
        fleet = quadratic_fleet([[0.0], [2.0]], taus=[2, 2], distribution_ids=[0, 1])
        policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=1)
        plan = plan_weights(
            scheme, fleet.importances, fleet.compute_times, policy, custom_d=custom_d
        )
        cfg = RunConfig(
            fleet=fleet, policy=policy, plan=plan, eta_g=1.0, eta_l=0.5, k_steps=1,
            full_gradient=True, rounds=502, theta0=np.array([5.0]),
            initial_clocks=(1, 2),
        )
        return plan, run(cfg)

    @staticmethod
    def _cycle_average(traj, plan, at_round):
        # single-participant rounds oscillate on a two-cycle; the d-weighted
        # average of the anchor models over one full cycle telescopes to the
        # weighted-optima limit and converges geometrically
        total, mass = 0.0, 0.0
        for k in (at_round, at_round + 1):
            (part,) = traj.rounds[k].participants
            weight = plan.d[part.client_id]
            total += weight * traj.theta[part.anchor_round, 0]
            mass += weight
        return total / mass

    def test_biased_weights_settle_on_the_weighted_combination(self):
        plan, traj = self._run_alternating(custom_d=[0.3, 0.6])
        limit = (0.3 * 0.0 + 0.6 * 2.0) / 0.9
        value = self._cycle_average(traj, plan, 498)
        assert abs(value - limit) < 1e-8
        report(3, f"biased limit error {abs(value - limit):.2e} (window-averaged)")

    def test_window_fair_weights_repair_the_bias(self):
        plan, traj = self._run_alternating(scheme=WeightScheme.FEDFIX_TIME_BASED)
        assert plan.d.tolist() == [1.0, 1.0]
        q_tilde = plan.q_over_window / plan.q_over_window.sum()
        assert np.allclose(q_tilde, [0.5, 0.5], atol=1e-15)
        value = self._cycle_average(traj, plan, 498)
        assert abs(value - 1.0) < 1e-8
        report(3, f"repaired limit error {abs(value - 1.0):.2e} (window-averaged)")


class TestCriterion4UniformSamplingFixedPoint:
    def test_recursion_fixed_point_meets_monte_carlo(self):
        started = time.perf_counter()
        state = OracleState("sync_uniform", 0.5, n_clients=2, m=1)
        recursion = variance_recursion(state, [0.0, 2.0], 40, theta0=1.0)
        assert abs(recursion.second_moment[-1] - 1 / 3) < 1e-12

        mc = run_scalar_ensemble(
            ScalarEnsembleConfig("sync_uniform", (0.0, 2.0), 0.5, theta0=1.0,
                                 n_rounds=40, n_runs=10_000, seed=11, m=1)
        )
        gap = abs(mc.second_moment[40] - recursion.second_moment[40])
        assert gap <= 3 * mc.se_second_moment[40]
        elapsed = time.perf_counter() - started
        assert elapsed < 30.0
        report(4, f"fixed point 1/3, MC gap {gap:.1e} <= 3se={3 * mc.se_second_moment[40]:.1e}, {elapsed:.2f}s")


class TestCriterion5AsyncExpectation:
    def test_mean_recursion_meets_the_ensemble(self):
        state = OracleState("async", 0.5, n_clients=2)
        oracle_mean = expectation_recursion(state, 20, 1.0, [0.0, 2.0]).mean(0.0)
        mc = run_scalar_ensemble(
            ScalarEnsembleConfig("async", (0.0, 2.0), 0.5, theta0=0.0,
                                 n_rounds=20, n_runs=100_000, seed=0)
        )
        worst_z = 0.0
        for n in (1, 5, 20):
            z = abs(mc.mean[n] - oracle_mean[n]) / mc.se_mean[n]
            worst_z = max(worst_z, z)
            assert z <= 3.0
        report(5, f"ensemble mean within {worst_z:.2f} standard errors at n in {{1,5,20}}")

    def test_staleness_laws_sum_to_one_exactly(self):
        from fractions import Fraction

        for m_clients in (2, 3, 7):
            state = OracleState("async", 0.5, n_clients=m_clients)
            for n in range(201):
                assert sum(staleness_law(state, n, exact=True)) == Fraction(1)
        report(5, "geometric staleness laws sum to 1 exactly for n <= 200")


class TestCriterion6ExpectedRoundTimes:
    def test_harmonic_sum_formulas(self):
        hw = HardwareModel("exponential")
        checks = [
            ("sync", WaitPolicy(PolicyKind.SYNCHRONOUS), [1.0] * 3, 3, None),
            ("sync_uniform", WaitPolicy(PolicyKind.SAMPLE_UNIFORM, m=2), [1.0] * 5, 5, 2),
            ("async", WaitPolicy(PolicyKind.ASYNCHRONOUS), [1.0] * 4, 4, None),
        ]
        margins = []
        for scheme, policy, taus, m_clients, m in checks:
            times = simulate_round_times(policy, hw, taus, 100_000, seed=29)
            se = times.std(ddof=1) / math.sqrt(times.size)
            target = expected_round_time(scheme, m_clients, 1.0, m=m)
            gap = abs(times.mean() - target)
            assert gap <= 3 * se
            margins.append(f"{scheme}:{gap / se:.2f}se")
        report(6, "empirical round times at " + ", ".join(margins))


class TestCriterion7WindowCloseForms:
    def test_time_based_weights_average_to_importances(self):
        rng = np.random.default_rng(1234)
        policy = WaitPolicy(PolicyKind.ASYNCHRONOUS)
        fleets = 0
        while fleets < 20:
            m = int(rng.integers(2, 7))
            taus = [int(t) for t in rng.integers(1, 13, size=m)]
            if len(set(taus)) == 1:
                continue  # identical hardware makes unit weights fair too
            p = [1.0 / m] * m
            plan = plan_weights(WeightScheme.ASYNC_TIME_BASED, p, taus, policy)
            if plan.window > 3000:
                continue  # keeps the schedule replay fast; the identity is exact regardless
            schedule = simulate_schedule(taus, policy, 2 * plan.window)
            q = np.zeros((2 * plan.window, m))
            for row, outcome in zip(q, schedule):
                for part in outcome.participants:
                    row[part.client_id] = part.multiplicity * plan.d[part.client_id]
            good = verify_window_assumption(q, plan.window, p, tol=1e-12)
            assert good.satisfied, (taus, good.max_deviation)

            identical = plan_weights(WeightScheme.IDENTICAL, p, taus, policy)
            q_id = np.where(q > 0, 1.0, 0.0)
            bad = verify_window_assumption(q_id, plan.window, p, tol=1e-12)
            assert not bad.satisfied, taus
            fleets += 1
        report(7, "20 random fleets: time-based exact to 1e-12, unit weights rejected")


class TestCriterion8HeterogeneousLogisticTrend:
    def test_time_based_beats_identical_weights(self):
        started = time.perf_counter()
        m_clients = 10
        rng = np.random.default_rng(2025)
        taus = np.round(1.0 + 0.8 * rng.random(m_clients), 3).tolist()  # up to 80% slower
        shards = make_synthetic_shards(
            SyntheticShardConfig(n_clients=m_clients, dim=5, samples_per_client=64,
                                 concentration=0.1, seed=1, batch_size=8)
        )
        fleet = Fleet(
            [ClientSpec(i, 1 / m_clients, taus[i], i) for i in range(m_clients)], shards
        )
        policy = WaitPolicy(PolicyKind.ASYNCHRONOUS)

        def final_losses(scheme):
            plan = plan_weights(scheme, fleet.importances, fleet.compute_times, policy)
            out = []
            for seed in range(5):
                cfg = RunConfig(
                    fleet=fleet, policy=policy, plan=plan, eta_g=1.0, eta_l=0.02,
                    k_steps=5, time_budget=120.0, seeds=Seeds((0,), (seed,), (2,)),
                )
                out.append(final_window_loss(run(cfg))[0])
            return out

        time_based = final_losses(WeightScheme.ASYNC_TIME_BASED)
        identical = final_losses(WeightScheme.IDENTICAL)
        elapsed = time.perf_counter() - started
        assert float(np.mean(time_based)) < float(np.mean(identical))
        assert elapsed < 300.0
        report(
            8,
            f"time-based {np.mean(time_based):.5f} < identical {np.mean(identical):.5f} "
            f"(gap {np.mean(identical) - np.mean(time_based):.1e}, {elapsed:.1f}s, 5 seeds)",
        )


class TestCriterion9LocalWorkSweep:
    def test_u_shape_with_growing_spread(self):
        document = {
            "schema_version": 1,
            "fleet": {
                "compute_times": [1, 2, 3, 4, 5],
                "objective": {
                    "family": "quadratic",
                    "optima": [-8.0, -4.0, 0.0, 4.0, 8.0],
                    "noise_std": 1.0,
                },
            },
            "scheme": {"policy": "asynchronous", "weights": "async_time_based"},
            "optimization": {"eta_g": 1.0, "eta_l": 0.006, "k_steps": 1, "theta0": 16.0},
            "horizon": {"time": 50.0},
            "ensemble": {"n_seeds": 10, "base_seed": 0},
        }
        rows = sweep_rows(document, "k_steps", [1, 2, 4, 8, 16, 25])
        means = [row["loss_mean"] for row in rows]
        stds = [row["loss_std"] for row in rows]
        argmin = int(np.argmin(means))
        assert 0 < argmin < len(means) - 1
        for i in range(argmin):
            assert means[i] > means[i + 1]
        for i in range(argmin, len(means) - 1):
            assert means[i] < means[i + 1]
        for i in range(argmin, len(stds) - 1):
            assert stds[i] <= stds[i + 1] + 1e-12
        report(
            9,
            f"loss argmin at K={[1, 2, 4, 8, 16, 25][argmin]}, "
            f"means {np.round(means, 3).tolist()}, stds nondecreasing beyond",
        )


class TestCriterion10BoundEvaluator:
    def test_monotonicity_ordering_and_spot_values(self):
        base = BoundInputs(
            n_clients=4, k_steps=4, n_rounds=200, eta_g=1.0, eta_l=0.05,
            smoothness=1.0, tau=1, window=2, alpha=0.5, beta=0.5,
            sigma=1.0, sigma1=1.0, residual=0.5, init_gap_sq=4.0,
        )
        from dataclasses import replace

        total = epsilon_terms(base).total
        for field_name in ("tau", "window", "alpha", "beta"):
            bumped = replace(base, **{field_name: getattr(base, field_name) * 2})
            assert epsilon_terms(bumped).total >= total

        for taus in ([1, 2], [1, 2, 4], [2, 3, 6]):
            fleet = quadratic_fleet([[float(2 * i)] for i in range(len(taus))], taus=taus)
            policy = WaitPolicy(PolicyKind.FEDFIX, delta_t=min(taus))
            shared = replace(base, n_clients=len(taus))
            totals = [
                epsilon_terms(fill_inputs(scheme_presets(name, fleet, policy, 10.0), shared)).total
                for name in ("sync", "fedfix", "async")
            ]
            assert totals[0] <= totals[1] <= totals[2]

        assert lr_constraint(1, 1.0, 1.0, 1.0, 0) == pytest.approx(1 / 144, abs=1e-18)
        truth_table = [
            ((0.0, 0.0, 0.5), True),
            ((1.0, 0.0, 0.5), False),
            ((0.3, 0.4, 0.4), False),
            ((0.0, 0.0, 1.0), False),
            ((0.2, 0.3, 0.9), True),
        ]
        for (a, b, c), expected in truth_table:
            assert exponent_check(a, b, c) is expected
        report(10, "monotone totals, sync <= fedfix <= async, lr spot 1/144, exponent table")


class TestCriterion11GradientCorrectness:
    def test_finite_differences_and_full_enumeration(self):
        rng = np.random.default_rng(99)

        def finite_difference(obj, theta, h=1e-6):
            grad = np.empty_like(theta)
            for j in range(theta.shape[0]):
                e = np.zeros_like(theta)
                e[j] = h
                grad[j] = (obj.value(theta + e) - obj.value(theta - e)) / (2 * h)
            return grad

        worst = 0.0
        for _ in range(100):
            quad = QuadraticObjective(
                rng.uniform(0.1, 2.0, 4), rng.normal(size=4), float(rng.normal())
            )
            x = rng.normal(size=(10, 4))
            y = (rng.random(10) < 0.5).astype(float)
            logistic = GlmObjective(x, y, "logistic", batch_size=2)
            for obj in (quad, logistic):
                theta = rng.normal(size=4)
                analytic = obj.gradient(theta)
                numeric = finite_difference(obj, theta)
                rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-8)
                worst = max(worst, rel)
                assert rel < 1e-5

        x = rng.normal(size=(8, 3))
        y = (rng.random(8) < 0.5).astype(float)
        obj = GlmObjective(x, y, "logistic", batch_size=2)
        theta = rng.normal(size=3)
        batches = list(itertools.combinations(range(8), 2))
        assert len(batches) == 28
        enumeration_mean = np.mean(
            [obj.batch_gradient(theta, np.array(b)) for b in batches], axis=0
        )
        gap = np.max(np.abs(enumeration_mean - obj.gradient(theta)))
        assert gap < 1e-12
        report(11, f"FD relative error max {worst:.1e} over 200 probes; enumeration gap {gap:.1e}")
