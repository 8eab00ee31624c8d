import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from calibrate import (
    e_step, fit, fit_report, forward_backward, initial_params, interval_kernels, log_likelihood, m_step,
)
from core import build_event_sequence, constant_exposure, validate_exposure, validate_params
from exceptions import EmptyState, NonIdentifiable, OrderMismatch, UnderflowCollapse
from models import EStepEstimators, SimulationConfig
from oracles import quadrature_estimators, unscaled_products
from run_metadata import get_run_metadata
from simulate import simulate_mmnpp


@pytest.fixture
def simulated_two_state():
    params = validate_params([[-0.2, 0.2], [0.3, -0.3]], [2.0, 9.0], [0.5, 0.5])
    gamma = validate_exposure([0.0, 40.0, 80.0], [1.0, 1.5, 0.8], 120.0)
    result = simulate_mmnpp(SimulationConfig(params=params, gamma=gamma, horizon=120.0, seed=2024))
    return params, gamma, build_event_sequence(result.claim_times, gamma)


class TestKernels:
    def test_claim_and_exposure_kernels(self, two_state_params):
        k_claim = interval_kernels(two_state_params, 1.0, 2.0, 0.5, 1)
        k_change = interval_kernels(two_state_params, 1.0, 2.0, 0.5, 0)
        assert k_claim.fbar.shape == (2, 2)
        assert_allclose(k_change.fdelta, k_change.fbar)
        assert_allclose(k_claim.fdelta, k_claim.fbar @ np.diag([4.0, 16.0]))

    def test_stacked_kernels(self, two_state_params):
        k = interval_kernels(two_state_params, [1.0, 2.0], [2.0, 2.0], [0.5, 0.0], [1, 0])
        assert k.fbar.shape == (2, 2, 2)
        assert_allclose(k.fbar[1], np.eye(2))

    def test_order_one_kernel(self):
        params = validate_params([[0.0]], [3.0], [1.0])
        k = interval_kernels(params, 2.0, 2.0, 0.25, 1)
        assert k.fdelta[0, 0] == pytest.approx(math.exp(-1.5) * 6.0)

    def test_survival_kernels_compose(self, three_state_params):
        whole = interval_kernels(three_state_params, 1.5, 1.5, 0.7, 0).fbar
        first = interval_kernels(three_state_params, 1.5, 1.5, 0.25, 0).fbar
        second = interval_kernels(three_state_params, 1.5, 1.5, 0.45, 0).fbar
        assert_allclose(first @ second, whole, rtol=0, atol=1e-10)


class TestForwardBackward:
    def test_order_one_loglik_formula(self):
        claims = np.array([0.3, 1.1, 2.5, 4.0])
        gamma = constant_exposure(4.0)
        params = validate_params([[0.0]], [5.0], [1.0])
        loglik = log_likelihood(forward_backward(params, build_event_sequence(claims, gamma)))
        assert loglik == pytest.approx(4 * math.log(5.0) - 5.0 * 4.0, rel=1e-12)

    def test_order_one_loglik_with_exposure(self, step_exposure, claim_times):
        params = validate_params([[0.0]], [1.5], [1.0])
        events = build_event_sequence(claim_times, step_exposure)
        expected = (claim_times.size * math.log(1.5) + np.sum(np.log([1, 1, 2, 2, 2, 0.5]))
                    - 1.5 * step_exposure.total_operational_time)
        assert log_likelihood(forward_backward(params, events)) == pytest.approx(expected, rel=1e-12)

    def test_scaled_matches_unscaled(self, two_state_params, three_state_params, step_events):
        for params in (two_state_params, three_state_params):
            recursion = forward_backward(params, step_events)
            alpha, _ = unscaled_products(params, recursion)
            assert abs(log_likelihood(recursion) - math.log(alpha[-1].sum())) <= 1e-10

    def test_scaled_matches_unscaled_random(self):
        rng = np.random.default_rng(31)
        for trial in range(10):
            r = int(rng.integers(2, 4))
            Q = rng.uniform(0.05, 1.0, size=(r, r))
            np.fill_diagonal(Q, 0.0)
            np.fill_diagonal(Q, -Q.sum(axis=1))
            params = validate_params(Q, rng.uniform(0.5, 5.0, size=r), np.full(r, 1.0 / r))
            claims = np.sort(rng.uniform(0.0, 10.0, size=int(rng.integers(5, 40))))
            gamma = validate_exposure([0.0, 4.0], [1.0, rng.uniform(0.5, 2.0)], 10.0)
            recursion = forward_backward(params, build_event_sequence(claims, gamma))
            alpha, _ = unscaled_products(params, recursion)
            assert abs(log_likelihood(recursion) - math.log(alpha[-1].sum())) <= 1e-10

    def test_redundant_exposure_change_is_neutral(self, two_state_params, three_state_params, claim_times,
                                                  step_exposure):
        # same gamma with an extra breakpoint at 5 where the value does not change
        split = validate_exposure([0.0, 3.0, 5.0, 7.0], [1.0, 2.0, 2.0, 0.5], 10.0)
        for params in (two_state_params, three_state_params):
            events = build_event_sequence(claim_times, step_exposure)
            split_events = build_event_sequence(claim_times, split)
            assert split_events.n == events.n + 1
            plain = forward_backward(params, events)
            refined = forward_backward(params, split_events)
            assert abs(log_likelihood(refined) - log_likelihood(plain)) <= 1e-10
            a = e_step(params, events, plain)
            b = e_step(params, split_events, refined)
            assert_allclose(b.n_hat, a.n_hat, rtol=1e-9)
            assert_allclose(b.t_star_hat, a.t_star_hat, rtol=1e-9)

    def test_recursion_shapes_and_normalization(self, two_state_params, step_events):
        recursion = forward_backward(two_state_params, step_events)
        m = step_events.n + 1
        assert recursion.m == m
        assert recursion.L.shape == (m + 1, 2)
        assert recursion.R.shape == (m + 2, 2)
        assert recursion.times[-1] == 10.0
        assert_allclose(recursion.L[1:].sum(axis=1), 1.0, atol=1e-12)
        assert_array_equal(recursion.R[-1], 1.0)
        # L(k) . R(k+1) is one at every step
        assert_allclose(np.sum(recursion.L[1:m + 1] * recursion.R[2:m + 2], axis=1), 1.0, rtol=1e-10)

    def test_no_events(self, two_state_params, unit_exposure):
        events = build_event_sequence([], unit_exposure)
        recursion = forward_backward(two_state_params, events)
        assert recursion.m == 1
        alpha, _ = unscaled_products(two_state_params, recursion)
        assert log_likelihood(recursion) == pytest.approx(math.log(alpha[-1].sum()))

    def test_underflow_reports_step(self):
        params = validate_params([[0.0]], [1e-310], [1.0])
        events = build_event_sequence([0.5, 1.0], constant_exposure(2.0))
        with pytest.raises(UnderflowCollapse) as info:
            forward_backward(params, events)
        assert info.value.k == 1


class TestEStep:
    def test_mass_balance(self, two_state_params, step_events, step_exposure):
        recursion = forward_backward(two_state_params, step_events)
        est = e_step(two_state_params, step_events, recursion)
        assert est.t_hat.sum() == pytest.approx(10.0, rel=1e-9)
        assert est.t_star_hat.sum() == pytest.approx(step_exposure.total_operational_time, rel=1e-9)
        assert est.n_hat.sum() == pytest.approx(step_events.n_claims, rel=1e-9)

    def test_diagonal_is_negative_row_sum(self, three_state_params, step_events):
        est = e_step(three_state_params, step_events, forward_backward(three_state_params, step_events))
        off = est.a_hat - np.diag(np.diag(est.a_hat))
        assert np.all(off >= 0)
        assert_allclose(np.diag(est.a_hat), -off.sum(axis=1))

    def test_unit_exposure_operational_equals_calendar(self, two_state_params, unit_exposure):
        events = build_event_sequence([0.4, 2.0, 2.2, 5.5, 9.1], unit_exposure)
        est = e_step(two_state_params, events, forward_backward(two_state_params, events))
        assert_allclose(est.t_star_hat, est.t_hat, rtol=0, atol=1e-12)

    def test_matches_quadrature(self, two_state_params, step_events):
        recursion = forward_backward(two_state_params, step_events)
        est = e_step(two_state_params, step_events, recursion)
        oracle = quadrature_estimators(two_state_params, recursion)
        assert_allclose(est.n_hat, oracle['n_hat'], rtol=1e-6)
        assert_allclose(est.t_hat, oracle['t_hat'], rtol=1e-6)
        assert_allclose(est.t_star_hat, oracle['t_star_hat'], rtol=1e-6)
        assert_allclose(est.a_hat, oracle['a_hat'], rtol=1e-6)

    def test_matches_quadrature_random_instances(self):
        rng = np.random.default_rng(77)
        for trial in range(3):
            Q = np.array([[0.0, rng.uniform(0.1, 1.0)], [rng.uniform(0.1, 1.0), 0.0]])
            np.fill_diagonal(Q, -Q.sum(axis=1))
            params = validate_params(Q, rng.uniform(0.5, 4.0, size=2), [0.5, 0.5])
            gamma = validate_exposure([0.0, 2.5], [1.0, rng.uniform(0.5, 2.0)], 5.0)
            claims = np.sort(rng.uniform(0.0, 5.0, size=int(rng.integers(3, 12))))
            events = build_event_sequence(claims, gamma)
            recursion = forward_backward(params, events)
            est = e_step(params, events, recursion)
            oracle = quadrature_estimators(params, recursion)
            for name in ('n_hat', 't_hat', 't_star_hat', 'a_hat'):
                assert_allclose(getattr(est, name), oracle[name], rtol=1e-6, err_msg=name)

    def test_threaded_reduction_is_deterministic(self, simulated_two_state):
        params, gamma, events = simulated_two_state
        recursion = forward_backward(params, events)
        serial = e_step(params, events, recursion, threads=1)
        threaded = e_step(params, events, recursion, threads=3, chunk_size=7)
        again = e_step(params, events, recursion, threads=3, chunk_size=7)
        assert_allclose(threaded.a_hat, serial.a_hat, rtol=1e-12)
        assert_allclose(threaded.t_hat, serial.t_hat, rtol=1e-12)
        assert_array_equal(threaded.a_hat, again.a_hat)
        assert_array_equal(threaded.t_star_hat, again.t_star_hat)


class TestMStep:
    def test_closed_form_update(self, two_state_params):
        est = EStepEstimators(a_hat=[[-2.0, 2.0], [3.0, -3.0]], n_hat=[10.0, 40.0], t_hat=[4.0, 6.0],
                              t_star_hat=[5.0, 8.0], occupancy=np.zeros((1, 2)))
        updated = m_step(est, two_state_params)
        assert_allclose(updated.Q, [[-0.5, 0.5], [0.5, -0.5]])
        assert_allclose(updated.lam, [2.0, 5.0])
        assert_array_equal(updated.pi, two_state_params.pi)

    def test_starved_state_is_held(self, two_state_params):
        est = EStepEstimators(a_hat=[[-1.0, 1.0], [0.0, 0.0]], n_hat=[5.0, 0.0], t_hat=[10.0, 0.0],
                              t_star_hat=[10.0, 0.0], occupancy=np.zeros((1, 2)))
        updated = m_step(est, two_state_params)
        assert_allclose(updated.Q[1], two_state_params.Q[1])
        assert updated.lam[1] == two_state_params.lam[1]
        assert updated.lam[0] == pytest.approx(0.5)
        assert any(w['source'] == 'm_step' for w in get_run_metadata().warnings)

    def test_all_states_starved(self, two_state_params):
        est = EStepEstimators(a_hat=np.zeros((2, 2)), n_hat=[0.0, 0.0], t_hat=[5.0, 5.0],
                              t_star_hat=[5.0, 5.0], occupancy=np.zeros((1, 2)))
        with pytest.raises(EmptyState):
            m_step(est, two_state_params)


class TestInitialParams:
    def test_order_one_is_mle(self, step_events, step_exposure):
        params = initial_params(step_events, step_exposure, 1)
        assert params.lam[0] == pytest.approx(6 / 12.5)

    def test_intensities_strictly_increasing(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        params = initial_params(events, gamma, 3)
        assert np.all(np.diff(params.lam) > 0)
        assert_allclose(params.Q[0], [-0.1, 0.05, 0.05])
        assert_allclose(params.pi, 1 / 3)

    def test_too_few_claims(self, step_exposure):
        events = build_event_sequence([1.0, 2.0], step_exposure)
        with pytest.raises(NonIdentifiable):
            initial_params(events, step_exposure, 3)


class TestFit:
    def test_order_one_converges_to_mle(self, step_events, step_exposure):
        result = fit(step_events, step_exposure, 1)
        assert result.converged
        assert result.params.lam[0] == pytest.approx(6 / 12.5, rel=1e-10)
        assert result.iterations <= 2

    def test_em_is_monotone(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        result = fit(events, gamma, 2, max_iter=40)
        assert np.all(np.diff(result.loglik) >= -1e-8)

    def test_recovers_separated_regimes(self, simulated_two_state):
        truth, gamma, events = simulated_two_state
        result = fit(events, gamma, 2)
        assert result.converged
        assert result.params.lam[1] / result.params.lam[0] > 2.0
        assert result.params.lam[0] < truth.lam[1] < result.params.lam[1] * 1.5

    def test_max_iter_zero(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        result = fit(events, gamma, 2, max_iter=0)
        assert not result.converged
        assert result.stop_reason == 'max_iter'
        assert result.iterations == 0
        assert len(result.loglik) == 1

    def test_parameter_stop_criterion(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        result = fit(events, gamma, 2, stop_criterion='params', tol_params=1e-3, max_iter=500)
        assert result.converged
        assert result.stop_reason == 'tolerance'

    def test_label_permutation_equivalence(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        init = initial_params(events, gamma, 2)
        a = fit(events, gamma, 2, init=init, max_iter=15)
        b = fit(events, gamma, 2, init=init.permuted([1, 0]), max_iter=15)
        assert_allclose(b.loglik, a.loglik, rtol=0, atol=1e-8)
        assert_allclose(b.params.lam, a.params.lam[[1, 0]], rtol=1e-8)
        assert_allclose(b.params.Q, a.params.Q[np.ix_([1, 0], [1, 0])], rtol=1e-8, atol=1e-12)

    def test_exposure_scaling_covariance(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        init = initial_params(events, gamma, 2)
        scaled_gamma = gamma.scaled(2.0)
        scaled_events = build_event_sequence(events.claim_times, scaled_gamma)
        scaled_init = validate_params(init.Q, init.lam / 2.0, init.pi)
        a = fit(events, gamma, 2, init=init, max_iter=10)
        b = fit(scaled_events, scaled_gamma, 2, init=scaled_init, max_iter=10)
        assert_allclose(b.params.lam, a.params.lam / 2.0, rtol=1e-8)
        assert_allclose(b.params.Q, a.params.Q, rtol=1e-8, atol=1e-12)
        assert_allclose(b.loglik, a.loglik, rtol=1e-10)

    def test_rerun_from_optimum_stops_quickly(self, simulated_two_state):
        _, gamma, events = simulated_two_state
        first = fit(events, gamma, 2)
        second = fit(events, gamma, 2, init=first.params)
        assert second.converged
        assert second.iterations <= 2

    def test_unit_exposure_equals_homogeneous_run(self, simulated_two_state):
        truth, _, events = simulated_two_state
        gamma = constant_exposure(120.0)
        unit_events = build_event_sequence(events.claim_times, gamma)
        a = fit(unit_events, gamma, 2, init=truth, max_iter=5)
        b = fit(unit_events, gamma, 2, init=truth, max_iter=5)
        assert_array_equal(a.params.lam, b.params.lam)
        assert_array_equal(a.loglik, b.loglik)
        assert_allclose(a.estimators.t_star_hat, a.estimators.t_hat, atol=1e-12)

    def test_order_exceeds_claims(self, step_exposure):
        events = build_event_sequence([1.0], step_exposure)
        with pytest.raises(NonIdentifiable):
            fit(events, step_exposure, 2)

    def test_init_order_mismatch(self, step_events, step_exposure, three_state_params):
        with pytest.raises(OrderMismatch):
            fit(step_events, step_exposure, 2, init=three_state_params)

    def test_fit_report_document(self, step_events, step_exposure):
        report = fit_report(fit(step_events, step_exposure, 1))
        assert {'loglik', 'iterations', 'converged', 'aHat', 'nHat', 'tHat', 'tStarHat'} <= set(report)
        assert isinstance(report['loglik'], list)
        assert report['tHat'][0] == pytest.approx(10.0)

    def test_fit_is_recorded(self, step_events, step_exposure):
        fit(step_events, step_exposure, 1)
        metadata = get_run_metadata()
        assert metadata.fits[-1]['order'] == 1
        assert metadata.iterations


@pytest.mark.slow
def test_em_monotone_on_random_instances():
    rng = np.random.default_rng(2718)
    for trial in range(20):
        r = int(rng.integers(2, 5))
        Q = rng.uniform(0.05, 0.5, size=(r, r))
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        truth = validate_params(Q, np.sort(rng.uniform(1.0, 20.0, size=r)), np.full(r, 1.0 / r))
        horizon = float(rng.uniform(100.0, 400.0))
        gamma = validate_exposure([0.0, horizon / 2], [1.0, float(rng.uniform(0.5, 2.0))], horizon)
        sim = simulate_mmnpp(SimulationConfig(params=truth, gamma=gamma, horizon=horizon, seed=trial))
        if sim.claim_times.size < r:
            continue
        events = build_event_sequence(sim.claim_times, gamma)
        result = fit(events, gamma, r, max_iter=60)
        assert np.all(np.diff(result.loglik) >= -1e-8), f"trial {trial}"
