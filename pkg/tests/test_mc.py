"""Monte Carlo layer: estimators, fits, thresholds, variance report."""

import numpy as np
import pytest

from srlab.integrator import ExitSpec, SimConfig, simulate
from srlab.mc import (BracketNotFound, DegeneratePoints, ExitEvent,
                      ExitStatistics, UnknownEvent, concentration_fit,
                      event_probability, fit_line, mode_variance_report,
                      run_batch, scaling_exponent, scalar_transition_probability,
                      threshold_bisect, transition_probability, wilson_interval)
from srlab.model import linear_drift, normal_form
from srlab.spectral import SpectralField, TorusSpec


def make_cfg(spec, **kw):
    base = dict(eps=1e-2, sigma=0.05, dt=5e-4, spec=spec, t_start=0.0,
                t_end=0.1, seed=0, record_stride=10 ** 9)
    base.update(kw)
    return SimConfig(**base)


class TestWilson:
    def test_all_hit(self):
        p, lo, hi = wilson_interval(50, 50)
        assert p == 1.0 and hi == 1.0 and lo < 1.0

    def test_none_hit_n100(self):
        p, lo, hi = wilson_interval(0, 100)
        assert p == 0.0 and lo == 0.0
        assert hi == pytest.approx(0.037, abs=0.002)

    def test_interval_shrinks_with_n(self):
        # quadrupling n roughly halves the width at fixed empirical rate
        for rate in (0.1, 0.5, 0.9):
            _, lo1, hi1 = wilson_interval(int(rate * 400), 400)
            _, lo2, hi2 = wilson_interval(int(rate * 1600), 1600)
            ratio = (hi2 - lo2) / (hi1 - lo1)
            assert 0.4 <= ratio <= 0.6

    def test_contains_p_hat(self):
        for s, n in [(3, 17), (0, 9), (9, 9), (250, 1000)]:
            p, lo, hi = wilson_interval(s, n)
            assert lo <= p <= hi


class TestRunBatch:
    @pytest.fixture
    def setup(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.08, seed=21)
        model = linear_drift(-1.0)
        init = SpectralField.zero(spec)
        exits = ExitSpec(h_stable=0.12, h_perp=0.5)
        return cfg, model, init, exits

    def test_single_trajectory_matches_simulate(self, setup):
        cfg, model, init, exits = setup
        batch = run_batch(cfg, model, init, exits, None, n=1)
        rec = simulate(cfg, model, init, exits, None, traj_index=0)
        assert batch.outcomes["tau_b"][0] == rec.tau_b
        assert batch.outcomes["tau_bperp"][0] == rec.tau_bperp
        assert batch.outcomes["terminal_phi0"][0] == rec.terminal_phi0

    def test_worker_count_invariance(self, setup):
        cfg, model, init, exits = setup
        a = run_batch(cfg, model, init, exits, None, n=300, n_workers=1)
        b = run_batch(cfg, model, init, exits, None, n=300, n_workers=3)
        assert np.array_equal(a.outcomes, b.outcomes)
        assert a.cfg_digest == b.cfg_digest

    def test_digest_stable_across_reruns(self, setup):
        cfg, model, init, exits = setup
        a = run_batch(cfg, model, init, exits, None, n=4)
        b = run_batch(cfg, model, init, exits, None, n=4)
        assert a.cfg_digest == b.cfg_digest
        assert np.array_equal(a.outcomes, b.outcomes)

    def test_sigma_zero_degenerates(self, setup):
        cfg, model, init, exits = setup
        cfg0 = make_cfg(cfg.spec, sigma=0.0, seed=21)
        batch = run_batch(cfg0, model, init, exits, None, n=8)
        o = batch.outcomes
        for name in ("tau_b", "tau_bperp", "terminal_phi0"):
            assert len(set(o[name].tolist())) == 1


class TestEventProbability:
    def test_unknown_event(self):
        spec = TorusSpec(1.0, 1)
        cfg = make_cfg(spec)
        batch = run_batch(cfg, linear_drift(-1.0), SpectralField.zero(spec),
                          None, None, n=2)
        with pytest.raises(UnknownEvent):
            event_probability(batch, "spontaneous-combustion", 1.0)

    def test_generous_radius_never_exits(self):
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.01, seed=2)
        batch = run_batch(cfg, linear_drift(-1.0), SpectralField.zero(spec),
                          ExitSpec(h_stable=5.0), None, n=100)
        st = event_probability(batch, ExitEvent.EXIT_B, cfg.t_end)
        assert st.p_hat == 0.0 and st.ci_high < 0.05

    def test_tiny_radius_always_exits(self):
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.05, seed=2)
        batch = run_batch(cfg, linear_drift(-1.0), SpectralField.zero(spec),
                          ExitSpec(h_perp=1e-9), None, n=50)
        st = event_probability(batch, "exit-bperp", cfg.t_end)
        assert st.p_hat == 1.0 and st.ci_high == 1.0


class TestFitLine:
    def test_exact_line(self):
        x = np.array([1.0, 2.0, 4.0, 7.5])
        fit = fit_line(x, -2.0 * x)
        assert fit.slope == pytest.approx(-2.0, abs=1e-12)
        assert fit.intercept == pytest.approx(0.0, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_needs_two_points(self):
        with pytest.raises(DegeneratePoints):
            fit_line([1.0], [2.0])


class TestConcentrationFit:
    def test_frozen_linear_scalar_reduction(self):
        # K = 0 scalar exit: negative slope, high r^2 (seed-checked)
        model = linear_drift(-0.7)
        spec = TorusSpec(1.0, 0, 8)
        cfg = make_cfg(spec, sigma=0.08, t_end=0.02, seed=5150)
        fit = concentration_fit(model, cfg, ExitSpec(),
                                h_values=[0.08, 0.11, 0.16, 0.22], n=800)
        assert fit.slope < 0
        assert fit.r_squared >= 0.9

    def test_transverse_modes_do_not_break_fit(self):
        model = linear_drift(-0.7)
        spec = TorusSpec(1.0, 8)
        cfg = make_cfg(spec, sigma=0.08, t_end=0.02, seed=5150)
        fit = concentration_fit(model, cfg, ExitSpec(),
                                h_values=[0.08, 0.11, 0.16, 0.22], n=800)
        assert fit.slope < 0 and fit.r_squared >= 0.9

    def test_degenerate_when_all_saturate(self):
        model = linear_drift(-0.7)
        spec = TorusSpec(1.0, 0, 8)
        cfg = make_cfg(spec, sigma=0.5, t_end=0.05, seed=1)
        with pytest.raises(DegeneratePoints):
            concentration_fit(model, cfg, ExitSpec(),
                              h_values=[0.01, 0.02, 0.04], n=200)

    def test_h_span_validated(self):
        model = linear_drift(-1.0)
        spec = TorusSpec(1.0, 0, 8)
        cfg = make_cfg(spec)
        with pytest.raises(ValueError):
            concentration_fit(model, cfg, ExitSpec(), h_values=[0.1, 0.12, 0.15],
                              n=10)


def logistic_prob_fn(sigma_star, sharpness=8.0):
    def prob(sigma, probe_seed):
        p = 1.0 / (1.0 + (sigma_star / sigma) ** sharpness)
        return ExitStatistics(p_hat=p, ci_low=p, ci_high=p, n=0,
                              event=ExitEvent.TRANSITION)
    return prob


class TestThresholdBisect:
    def test_synthetic_logistic(self):
        tol = 0.05
        sig, st, probes = threshold_bisect(None, 0.04, 1e-3, n=100, tol=tol,
                                           prob_fn=logistic_prob_fn(0.1))
        assert abs(np.log(sig / 0.1)) <= tol

    def test_bracket_not_found(self):
        with pytest.raises(BracketNotFound):
            threshold_bisect(None, 0.04, 1e-3, n=10, tol=0.1,
                             prob_fn=logistic_prob_fn(1e9), max_probes=6)

    def test_probes_are_recorded_with_seeds(self):
        _, _, probes = threshold_bisect(None, 0.04, 1e-3, n=10, tol=0.2,
                                        prob_fn=logistic_prob_fn(0.09),
                                        master_seed=4)
        assert len(probes) >= 3
        seeds = [s for _, s, _ in probes]
        assert len(set(seeds)) == len(seeds)


class TestScalingExponent:
    def test_synthetic_exact_power_law(self):
        def factory(delta, eps):
            return logistic_prob_fn(max(delta, eps) ** 0.75, sharpness=64.0)

        fit = scaling_exponent(None, [0.01, 0.02, 0.04, 0.08, 0.16], 1e-3,
                               n=10, tol=0.01, prob_fn_factory=factory)
        assert fit.slope == pytest.approx(0.75, abs=0.01)
        assert fit.r_squared >= 0.999

    def test_preconditions(self):
        with pytest.raises(ValueError):
            scaling_exponent(None, [0.001, 0.01, 0.1], 1e-3, n=10)
        with pytest.raises(ValueError):
            scaling_exponent(None, [0.02, 0.04, 0.08], 1e-3, n=10)


class TestModeVarianceReport:
    def test_matches_exact_ou_variance(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.05, eps=1e-2, dt=5e-4, t_end=0.4,
                       seed=77, record_stride=40)
        rows, c0 = mode_variance_report(cfg, n=4000, k_max=4, a=-1.0)
        assert c0 > 0 and np.isfinite(c0)
        for r in rows:
            assert abs(r["var_final"] - r["exact_var"]) <= 3.0 * r["se_final"]

    def test_sigma_scaling_is_exact_pathwise(self):
        # same seed, doubled sigma: every variance scales by exactly 4
        spec = TorusSpec(1.0, 2)
        base = dict(eps=1e-2, dt=5e-4, spec=spec, t_start=0.0, t_end=0.2,
                    seed=5, record_stride=20)
        r1, _ = mode_variance_report(SimConfig(sigma=0.04, **base), 500, 3)
        r2, _ = mode_variance_report(SimConfig(sigma=0.08, **base), 500, 3)
        for a, b in zip(r1, r2):
            assert b["var_sup"] == pytest.approx(4.0 * a["var_sup"], rel=1e-12)

    def test_envelope_nonincreasing_beyond_first_mode(self):
        spec = TorusSpec(1.0, 8)
        cfg = make_cfg(spec, sigma=0.05, eps=1e-2, t_end=0.4, seed=3,
                       record_stride=40)
        rows, _ = mode_variance_report(cfg, n=3000, k_max=8, a=-1.0)
        ratios = [r["ratio_sup"] for r in rows]
        for k in range(2, 9):
            assert ratios[k] <= 1.2 * ratios[1]


class TestTransitionProbability:
    def test_sigma_zero_is_deterministic_zero(self):
        st = transition_probability(None, 0.04, 1e-3, 0.0, n=64, K=2)
        assert st.p_hat == 0.0 and st.n == 64

    def test_regime_monotonicity_in_sigma(self):
        delta, eps = 0.04, 1e-3
        sc = delta**0.75
        stats = [transition_probability(None, delta, eps, m * sc, n=150,
                                        K=4, seed=11)
                 for m in (0.5, 0.8, 1.1, 1.6)]
        for lo, hi in zip(stats, stats[1:]):
            # nondecreasing up to CI overlap
            assert hi.ci_high >= lo.ci_low

    def test_k0_matches_scalar_oracle(self):
        delta, eps = 0.04, 1e-3
        sigma = delta**0.75
        T0, d = 0.5, np.sqrt(delta)
        st = transition_probability(None, delta, eps, sigma, n=300, K=0,
                                    T0=T0, seed=314)
        oracle = scalar_transition_probability(delta, eps, sigma, 300, d,
                                               2 * d, T0, seed=2718)
        assert st.ci_low <= oracle.ci_high and oracle.ci_low <= st.ci_high
