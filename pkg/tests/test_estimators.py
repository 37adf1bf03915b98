"""Estimator tests: worked examples, Monte-Carlo oracles, robustness."""

import math

import numpy as np
import pytest

from floodsync.channel import preset, sample_delay_array
from floodsync.clock import NodeClock
from floodsync.estimators import (
    EstimatorError,
    ObservationWindow,
    PIState,
    RegressionTable,
    filter_uncertain_indices,
    linreg_fit,
    mle_offset,
    mle_offset_increment,
    mle_skew,
    pi_update,
    speed_agreement_update,
)

SIGMA = 0.0049**0.5


def pairs_from_diffs(diffs):
    """Build (local, remote) pairs whose local-minus-remote equal diffs."""
    return [(1000.0 + d, 1000.0) for d in diffs]


class TestOffsetIncrement:
    def test_constant_shift(self):
        old = pairs_from_diffs([3, 3, 3])
        new = pairs_from_diffs([13, 13, 13])
        assert mle_offset_increment(old, new) == pytest.approx(10.0)

    def test_mean_difference_identity(self):
        old = pairs_from_diffs([3.1, 3.3, 3.2, 3.4, 3.0])
        new = pairs_from_diffs([8.2, 8.4, 8.1, 8.3, 8.5])
        assert mle_offset_increment(old, new) == pytest.approx(5.10)

    def test_length_mismatch(self):
        with pytest.raises(EstimatorError):
            mle_offset_increment(pairs_from_diffs([1, 2]), pairs_from_diffs([1]))

    def test_empty(self):
        with pytest.raises(EstimatorError):
            mle_offset_increment([], [])

    def test_unbiased_with_gaussian_delays(self):
        # error has zero mean and variance ~ 2 sigma^2 / M over 1e4 trials
        rng = np.random.default_rng(101)
        m = 5
        true_inc = 7.5
        trials = 10_000
        du = rng.normal(0, SIGMA, (trials, m))
        dv = rng.normal(0, SIGMA, (trials, m))
        est = (true_inc + dv - du).mean(axis=1)
        err = est - true_inc
        se = (2 * 0.0049 / m / trials) ** 0.5
        assert abs(err.mean()) < 3 * se
        assert err.var() == pytest.approx(2 * 0.0049 / m, rel=0.10)

    def test_matches_grid_search_likelihood(self):
        # the closed-form estimate equals the arg-max of the Gaussian
        # log-likelihood located by grid search, to grid resolution
        rng = np.random.default_rng(55)
        step = 1e-4
        for _ in range(100):
            m = int(rng.integers(1, 6))
            p = rng.normal(5.0, 2.0, m)
            old = pairs_from_diffs(np.zeros(m))
            new = pairs_from_diffs(p)
            est = mle_offset_increment(old, new)
            grid = np.arange(p.min() - 0.5, p.max() + 0.5, step)
            loglik = -((p[None, :] - grid[:, None]) ** 2).sum(axis=1)
            best = grid[int(np.argmax(loglik))]
            assert abs(est - best) <= step / 2 + 1e-9


class TestSkew:
    def test_no_relative_drift(self):
        w = ObservationWindow(
            old_pairs=[(100.0, 90.0)], new_pairs=[(30_000_100.0, 30_000_090.0)]
        )
        est = mle_skew(w)
        assert est.valid and est.phi == pytest.approx(1.0)

    def test_one_ppm_magnitude(self):
        # 30 us of offset increment over a 30 s window is a 1 ppm rate step
        tau = 30e6
        w = ObservationWindow(
            old_pairs=[(0.0, 0.0)], new_pairs=[(tau + 30.0, tau)]
        )
        est = mle_skew(w)
        assert est.valid
        assert abs(est.phi - 1.0) == pytest.approx(1e-6, rel=1e-3)

    def test_direction_corrects_fast_local_clock(self):
        # local hardware gained 30 us on the remote: the multiplier must
        # slow the local clock down (phi < 1)
        tau = 30e6
        w = ObservationWindow(
            old_pairs=[(0.0, 0.0)], new_pairs=[(tau + 30.0, tau)]
        )
        assert mle_skew(w).phi < 1.0

    def test_non_positive_tau_invalid(self):
        w = ObservationWindow(old_pairs=[(0.0, 100.0)], new_pairs=[(0.0, 100.0)])
        assert not mle_skew(w).valid

    def test_implausible_rate_invalid(self):
        w = ObservationWindow(old_pairs=[(0.0, 0.0)], new_pairs=[(40_000.0, 30_000.0)])
        assert not mle_skew(w).valid

    def test_recovers_forty_ppm_with_quantized_clocks(self):
        # two clocks 40 ppm apart, observed through quantized timestamps
        # and Gaussian delay jitter: |phi - 1.00004| < 2e-8 in >= 95% of
        # 1e3 trials (Monte-Carlo against the ground-truth rate ratio)
        rng = np.random.default_rng(424)
        t_b_ns = 30 * 10**9
        gap_ns = 20 * 10**6
        n = 5
        hits = 0
        trials = 1000
        for _ in range(trials):
            local = NodeClock(node_id=0, drift_ppm=0.0)
            remote = NodeClock(node_id=1, drift_ppm=40.0)
            t0 = int(rng.integers(0, 10**9))
            windows = []
            for base in (t0, t0 + t_b_ns):
                pairs = []
                for k in range(n):
                    t_send = base + k * gap_ns
                    d_ns = round((3.322 + rng.normal(0, SIGMA)) * 1000)
                    pairs.append(
                        (local.hardware_read(t_send + d_ns),
                         remote.hardware_read(t_send))
                    )
                windows.append(pairs)
            est = mle_skew(ObservationWindow(old_pairs=windows[0], new_pairs=windows[1]))
            assert est.valid
            if abs(est.phi - 1.0000400) < 2e-8:
                hits += 1
        assert hits >= 0.95 * trials


class TestOffset:
    def test_min_discards_uncertain_packet(self):
        # true offset +100 us (local ahead); delays carry one uncertain hit
        delays = [3.3, 3.25, 913.4, 3.35, 3.3]
        pairs = [(500.0 + 100.0 + d, 500.0) for d in delays]
        correction = mle_offset(pairs, 3.0)
        assert correction == pytest.approx(-100.25)
        assert abs(correction - (-100.0)) == pytest.approx(0.25)

    def test_single_calibrated_packet_exact(self):
        pairs = [(700.0 + 3.0, 700.0)]
        assert mle_offset(pairs, 3.0) == pytest.approx(0.0)

    def test_sign_convention_local_behind(self):
        # local clock 50 us behind: correction is positive
        pairs = [(1000.0 - 50.0 + 3.0, 1000.0)]
        assert mle_offset(pairs, 3.0) == pytest.approx(50.0)

    def test_empty_rejected(self):
        with pytest.raises(EstimatorError):
            mle_offset([], 3.0)

    def test_negative_prior_rejected(self):
        with pytest.raises(EstimatorError):
            mle_offset([(1.0, 0.0)], -1.0)

    def test_min_filter_dominance(self):
        # the min-filter estimate is never worse than any single-packet
        # estimate from the same window
        rng = np.random.default_rng(77)
        profile = preset("equal")
        for _ in range(2000):
            delays = sample_delay_array(profile, rng, 5)
            true_offset = float(rng.uniform(-1000, 1000))
            pairs = [(100.0 + true_offset + d, 100.0) for d in delays]
            best = mle_offset(pairs, 3.0)
            err_best = abs(best - (-true_offset))
            for d in delays:
                single = mle_offset([(100.0 + true_offset + d, 100.0)], 3.0)
                assert err_best <= abs(single - (-true_offset)) + 1e-9

    def test_contamination_probability(self):
        # the min-filtered estimate is contaminated only when every packet
        # of the round carries an uncertain delay: p_unc^N
        rng = np.random.default_rng(2025)
        profile = preset("equal")
        n_est, n = 200_000, 5
        delays = sample_delay_array(profile, rng, n_est * n).reshape(n_est, n)
        err = delays.min(axis=1) - 3.0  # signed estimate error
        p_expect = 0.1175**n
        frac = float((np.abs(err) > 10 * SIGMA).mean())
        sd = (p_expect * (1 - p_expect) / n_est) ** 0.5
        assert abs(frac - p_expect) <= 3 * sd


class TestUncertainFilter:
    def test_keeps_clean_window(self):
        pairs = pairs_from_diffs([3.1, 3.3, 3.2])
        assert filter_uncertain_indices(pairs) == [0, 1, 2]

    def test_drops_inflated_entries(self):
        pairs = pairs_from_diffs([3.1, 503.3, 3.2, 103.4, 3.3])
        assert filter_uncertain_indices(pairs) == [0, 2, 4]

    def test_all_inflated_look_clean(self):
        # a fully contaminated window has no internal anchor
        pairs = pairs_from_diffs([903.1, 903.3, 903.2])
        assert filter_uncertain_indices(pairs) == [0, 1, 2]

    def test_empty(self):
        assert filter_uncertain_indices([]) == []


class TestLinearRegression:
    def test_noiseless_line(self):
        table = RegressionTable()
        for k in range(8):
            x = k * 30e6
            table.add(x, 1.00004 * x + 500.0)
        slope, predict = linreg_fit(table)
        assert slope == pytest.approx(1.00004, abs=1e-12)
        assert predict(0.0) == pytest.approx(500.0, abs=1e-6)

    def test_two_points_interpolate(self):
        table = RegressionTable()
        table.add(0.0, 10.0)
        table.add(100.0, 130.0)
        slope, predict = linreg_fit(table)
        assert slope == pytest.approx(1.2)
        assert predict(0.0) == pytest.approx(10.0)
        assert predict(100.0) == pytest.approx(130.0)

    def test_slope_noise_matches_closed_form(self):
        # empirical slope variance against the closed-form OLS variance
        # sigma^2 * 12 / (n (n^2 - 1) dx^2)
        rng = np.random.default_rng(8)
        n, dx, sigma = 8, 30e6, 0.07
        slopes = []
        for _ in range(4000):
            table = RegressionTable()
            for k in range(n):
                table.add(k * dx, k * dx + rng.normal(0, sigma))
            slopes.append(linreg_fit(table)[0])
        var_expect = sigma**2 * 12 / (n * (n**2 - 1) * dx**2)
        assert np.var(slopes) == pytest.approx(var_expect, rel=0.10)

    def test_residual_orthogonality(self):
        # noiseless data fits exactly; noisy residuals are orthogonal to x
        table = RegressionTable()
        for k in range(8):
            table.add(k * 10.0, 3.0 * k * 10.0 + 7.0)
        _, predict = linreg_fit(table)
        assert max(abs(y - predict(x)) for x, y in table.entries) < 1e-9

        rng = np.random.default_rng(31)
        noisy = RegressionTable()
        for k in range(8):
            noisy.add(k * 10.0, k * 10.0 + rng.normal(0, 2.0))
        _, predict = linreg_fit(noisy)
        xs = np.array([x for x, _ in noisy.entries])
        res = np.array([y - predict(x) for x, y in noisy.entries])
        assert abs(np.corrcoef(xs, res)[0, 1]) < 1e-10

    def test_degenerate_rejected(self):
        table = RegressionTable()
        table.add(5.0, 1.0)
        table.add(5.0, 2.0)
        with pytest.raises(EstimatorError):
            linreg_fit(table)

    def test_capacity_is_eight(self):
        table = RegressionTable()
        assert table.capacity == 8
        for k in range(20):
            table.add(float(k), float(k))
        assert len(table) == 8

    def test_too_few_entries(self):
        table = RegressionTable()
        table.add(0.0, 0.0)
        with pytest.raises(EstimatorError):
            linreg_fit(table)


class TestPIController:
    def test_zero_error_fixed_point(self):
        state = PIState()
        offset, rate = pi_update(state, 0.0, 30.0)
        assert offset == 0.0 and rate == state.rate_correction

    def test_integral_increment(self):
        state = PIState(alpha_p=1.0, beta_i=0.5)
        offset, rate = pi_update(state, 10.0, 30.0)
        assert offset == pytest.approx(10.0)
        assert rate == pytest.approx(10 * 0.5 / (30 * 1e6), rel=1e-9)

    def test_invalid_interval(self):
        with pytest.raises(EstimatorError):
            pi_update(PIState(), 1.0, 0.0)

    def test_invalid_gains(self):
        with pytest.raises(EstimatorError):
            PIState(alpha_p=0.0)

    def test_closed_loop_converges(self):
        # noise-free two-node loop: offset jumps plus integral rate
        # accumulation drive the per-round error to a bounded residual
        t_b = 30.0
        drift = 40e-6  # relative rate error, us per us
        state = PIState(alpha_p=1.0, beta_i=0.5)
        errors = []
        for _ in range(20):
            e = (drift - state.rate_correction) * t_b * 1e6
            errors.append(abs(e))
            _, state.rate_correction = pi_update(state, e, t_b)
        for a, b in zip(errors[3:], errors[4:]):
            assert b <= a + 1e-12
        assert errors[-1] < 1.0


class TestSpeedAgreement:
    def test_consensus_fixed_point(self):
        assert speed_agreement_update(1.0, [1.0, 1.0]) == pytest.approx(1.0)

    def test_symmetric_average(self):
        assert speed_agreement_update(1.0, [1.00002, 0.99998]) == pytest.approx(1.0)

    def test_empty_keeps_rate(self):
        assert speed_agreement_update(1.000013, []) == 1.000013

    def test_ring_consensus_converges(self):
        # ring of four nodes with distinct drifts: iterating the agreement
        # with exact relative-rate measurements reaches a common effective
        # rate within 1e-8 in at most 200 rounds
        rates = np.array([1 + 30e-6, 1 - 10e-6, 1 + 5e-6, 1 - 25e-6])
        phi = np.ones(4)
        neighbors = {0: [1, 3], 1: [0, 2], 2: [1, 3], 3: [2, 0]}
        for _ in range(200):
            new_phi = phi.copy()
            for i in range(4):
                implied = [
                    phi[j] * rates[j] / rates[i] for j in neighbors[i]
                ]
                new_phi[i] = speed_agreement_update(phi[i], implied)
            phi = new_phi
        effective = rates * phi
        assert effective.max() - effective.min() < 1e-8
