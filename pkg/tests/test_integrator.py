"""Integrator: exponential Euler stepping, noise law, exit detection."""

import numpy as np
import pytest
from scipy import stats

from srlab._streams import mode_stream, trajectory_streams
from srlab.integrator import (ExitSpec, NonFinite, SimConfig, noise_increment_std,
                              simulate, simulate_batch, simulate_linear_mode,
                              step)
from srlab.model import custom_drift, linear_drift, normal_form
from srlab.spectral import SpectralField, TorusSpec, hs_weights


def zero_drift():
    z = lambda t, p: np.zeros_like(np.asarray(p, dtype=float))
    return custom_drift(lambda t, p: np.zeros_like(np.asarray(p, dtype=float)),
                        z, z, degree=1)


def make_cfg(spec, **kw):
    base = dict(eps=1e-2, sigma=0.05, dt=5e-4, spec=spec, t_start=0.0,
                t_end=0.5, seed=0, record_stride=1)
    base.update(kw)
    return SimConfig(**base)


class TestNoiseIncrementStd:
    def test_brownian_mode(self):
        assert noise_increment_std(0, 5e-4, 1e-2, 0.3, 0.0) == pytest.approx(
            0.3 * np.sqrt(0.05))

    def test_stationary_limit(self):
        # mu dt/eps -> infinity saturates at sigma / sqrt(2 mu)
        val = noise_increment_std(3, 1.0, 1e-6, 0.2, 5.0)
        assert val == pytest.approx(0.2 / np.sqrt(10.0), rel=1e-12)

    def test_log2_plugin(self):
        assert noise_increment_std(1, np.log(2.0), 1.0, 1.0, 1.0) == pytest.approx(
            np.sqrt(3.0 / 8.0))

    def test_rejects_bad_steps(self):
        with pytest.raises(ValueError):
            noise_increment_std(0, -1.0, 1.0, 0.1, 0.0)


class TestStep:
    def test_pure_heat_decay(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.0)
        st = SpectralField.basis(spec, 1)
        out = step(st, 0.0, cfg, zero_drift(), trajectory_streams(0, 0, spec.wavenumbers))
        assert out.coeff(1) == pytest.approx(np.exp(-np.pi**2 * cfg.dt / cfg.eps))

    def test_scalar_exponential_one_step(self):
        # k=0 mode of f=-phi: update 1 + a dt/eps matches exp within O((dt/eps)^2)
        spec = TorusSpec(1.0, 0, 8)
        cfg = make_cfg(spec, sigma=0.0, dt=2e-4)
        st = SpectralField.basis(spec, 0)
        out = step(st, 0.0, cfg, linear_drift(-1.0),
                   trajectory_streams(0, 0, spec.wavenumbers))
        theta = cfg.dt / cfg.eps
        assert abs(out.coeff(0) - np.exp(-theta)) <= 0.6 * theta**2

    def test_nonfinite_raises(self):
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.0)
        blow = custom_drift(lambda t, p: np.full_like(np.asarray(p, dtype=float), 1e308))
        st = SpectralField.constant(spec, 1.0)
        with pytest.raises(NonFinite):
            step(step(st, 0.0, cfg, blow, []), 0.0, cfg, blow, [])

    def test_matches_batch_engine_bitwise(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.08, t_end=0.5)
        model = normal_form(0.04)
        init = SpectralField.constant(spec, 0.2)
        streams = trajectory_streams(cfg.seed, 0, spec.wavenumbers)
        manual = init
        for n in range(3):
            manual = step(manual, cfg.t_start + n * cfg.dt, cfg, model, streams)
        cfg3 = make_cfg(spec, sigma=0.08, t_end=3 * cfg.dt, record_stride=3)
        res = simulate_batch(cfg3, model, init, None, None, traj_indices=[0],
                             collect_series=True)
        assert res["phi0"][0][-1] == manual.coeff(0)


class TestStationaryVariance:
    def test_heat_mode_variance_matches_closed_form(self):
        # f = 0: the discrete chain is the exact stochastic convolution
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.06, t_end=0.3, seed=42, record_stride=600)
        n = 4000
        a0 = lambda t: np.zeros_like(np.asarray(t, dtype=float))
        for k in (1, 2):
            paths = simulate_linear_mode(k, a0, cfg, n_paths=n)
            v = paths[:, -1].var(ddof=1)
            exact = cfg.sigma**2 / (2.0 * (k * np.pi) ** 2)
            se = exact * np.sqrt(2.0 / (n - 1))
            assert abs(v - exact) <= 3.0 * se

    def test_mean_square_consistency_at_every_recorded_time(self):
        # f = 0: the engine's chain is the exact stochastic convolution, so
        # each mode has mean 0 and the closed-form variance at every sample
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.06, dt=2e-4, t_end=0.06, seed=13,
                       record_stride=30, record_fields=True)
        n = 2000
        res = simulate_batch(cfg, zero_drift(), SpectralField.zero(spec),
                             None, None, traj_indices=range(n))
        fields = res["fields"]  # (n, n_rec, modes)
        t_rec = res["t_samples"]
        for k in (0, 1, 2):
            mu = (k * np.pi) ** 2
            idx = spec.index_of(k)
            for j in range(1, len(t_rec)):
                samples = fields[:, j, idx]
                if mu > 0:
                    exact = cfg.sigma**2 * (1 - np.exp(-2 * mu * t_rec[j] / cfg.eps)) / (2 * mu)
                else:
                    exact = cfg.sigma**2 * t_rec[j] / cfg.eps
                se_mean = np.sqrt(exact / n)
                assert abs(samples.mean()) <= 3.0 * se_mean
                se_var = exact * np.sqrt(2.0 / (n - 1))
                assert abs(samples.var(ddof=1) - exact) <= 3.0 * se_var

    def test_full_engine_matches_linear_sampler_statistically(self):
        # same stationary law through the exponential-Euler field path, f = a phi
        spec = TorusSpec(1.0, 1)
        a = -1.0
        cfg = make_cfg(spec, sigma=0.05, dt=1e-4, t_end=0.3, seed=7,
                       record_stride=3000)
        res = simulate_batch(cfg, linear_drift(a), SpectralField.zero(spec),
                             None, None, traj_indices=range(3000))
        v = np.nanvar(res["phi0"][:, -1], ddof=1)
        exact = cfg.sigma**2 / (2.0 * abs(a))
        se = exact * np.sqrt(2.0 / 2999)
        # dt-bias of the explicit reaction term is O(dt/eps) = 1%
        assert abs(v - exact) <= 3.0 * se + 0.015 * exact


class TestSimulateExits:
    def test_deterministic_run_never_exits(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.0, t_end=0.2)
        rec = simulate(cfg, linear_drift(-1.0), SpectralField.zero(spec),
                       ExitSpec(h_perp=1.0, h_stable=1.0, d_level=0.5,
                                d0_level=1.0))
        assert np.isinf([rec.tau_bperp, rec.tau_b, rec.tau_minus_d,
                         rec.tau_minus_d0]).all()
        assert not rec.failed

    def test_tiny_transverse_tube_exits_immediately(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.05)
        rec = simulate(cfg, zero_drift(), SpectralField.zero(spec),
                       ExitSpec(h_perp=1e-8))
        assert rec.tau_bperp <= cfg.t_start + 5 * cfg.dt

    def test_exit_probability_decreases_with_radius(self):
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.1, t_end=0.1, seed=3, record_stride=10 ** 9)
        model = linear_drift(-1.0)
        init = SpectralField.zero(spec)

        def n_exits(h):
            res = simulate_batch(cfg, model, init, ExitSpec(h_stable=h), None,
                                 traj_indices=range(500), collect_series=False)
            return np.isfinite(res["tau_b"]).sum()

        assert n_exits(0.30) < n_exits(0.15)

    def test_pathwise_exit_monotonicity(self):
        # same seed: enlarging a radius never decreases the hitting time
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.1, t_end=0.2, seed=15, record_stride=10 ** 9)
        model = linear_drift(-1.0)
        init = SpectralField.zero(spec)
        for small, large in [(0.05, 0.08), (0.02, 0.2)]:
            r1 = simulate_batch(cfg, model, init, ExitSpec(h_stable=small,
                                                           h_perp=small),
                                None, traj_indices=range(64),
                                collect_series=False)
            r2 = simulate_batch(cfg, model, init, ExitSpec(h_stable=large,
                                                           h_perp=large),
                                None, traj_indices=range(64),
                                collect_series=False)
            assert np.all(r2["tau_b"] >= r1["tau_b"])
            assert np.all(r2["tau_bperp"] >= r1["tau_bperp"])

    def test_hit_time_consistent_with_observables(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.05, t_end=0.2, record_stride=1)
        h = 0.04
        rec = simulate(cfg, zero_drift(), SpectralField.zero(spec),
                       ExitSpec(h_perp=h))
        if np.isfinite(rec.tau_bperp):
            before = rec.t_samples < rec.tau_bperp - cfg.dt / 2
            assert np.all(rec.perp_hs[before] < h)

    def test_b0_monitor_requires_frame(self):
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec)
        with pytest.raises(ValueError):
            simulate(cfg, linear_drift(-1.0), SpectralField.zero(spec),
                     ExitSpec(h=1.0), frame=None)


class TestBatchDeterminism:
    def test_single_equals_batch_member(self):
        spec = TorusSpec(1.0, 6)
        cfg = make_cfg(spec, sigma=0.1, t_end=0.1, seed=77, record_stride=20)
        model = normal_form(0.04)
        init = SpectralField.constant(spec, 0.2)
        ex = ExitSpec(d_level=0.2, d0_level=0.4, h_perp=2.0)
        single = simulate_batch(cfg, model, init, ex, None, traj_indices=[9])
        batch = simulate_batch(cfg, model, init, ex, None, traj_indices=range(32))
        np.testing.assert_array_equal(single["phi0"][0], batch["phi0"][9])
        np.testing.assert_array_equal(single["perp_hs"][0], batch["perp_hs"][9])
        for name in ("tau_bperp", "tau_minus_d", "tau_minus_d0"):
            assert single[name][0] == batch[name][9]

    def test_deterministic_rerun_is_bitwise(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.07, t_end=0.2, seed=5, record_stride=40)
        model = normal_form(0.02)
        init = SpectralField.constant(spec, 0.15)
        a = simulate_batch(cfg, model, init, None, None, traj_indices=range(8))
        b = simulate_batch(cfg, model, init, None, None, traj_indices=range(8))
        np.testing.assert_array_equal(a["phi0"], b["phi0"])


class TestLinearModeSampler:
    def test_sigma_zero_exponential_decay(self):
        spec = TorusSpec(1.0, 4)
        cfg = make_cfg(spec, sigma=0.0, t_end=0.1)
        a = lambda t: -1.0 * np.ones_like(np.asarray(t, dtype=float))
        paths = simulate_linear_mode(2, a, cfg, n_paths=1, psi0=1.0)
        mu2 = (2 * np.pi) ** 2
        expect = np.exp(-(mu2 + 1.0) * 0.1 / cfg.eps)
        assert paths[0, -1] == pytest.approx(expect, rel=1e-10)

    def test_requires_contraction(self):
        spec = TorusSpec(1.0, 1)
        cfg = make_cfg(spec)
        grow = lambda t: 2.0 * np.ones_like(np.asarray(t, dtype=float))
        with pytest.raises(ValueError):
            simulate_linear_mode(0, grow, cfg)

    def test_variance_bound_envelope(self):
        # sup_t Var(psi_k) <= C0 sigma^2 / <k>^2 with fitted C0 <= 2 L^2/pi^2 + 1
        spec = TorusSpec(1.0, 8)
        cfg = make_cfg(spec, sigma=0.05, t_end=0.3, seed=8, record_stride=20)
        a0 = lambda t: np.zeros_like(np.asarray(t, dtype=float))
        c0 = 0.0
        for k in range(1, 9):
            paths = simulate_linear_mode(k, a0, cfg, n_paths=2000)
            var_sup = paths.var(axis=0, ddof=1).max()
            c0 = max(c0, var_sup * (1.0 + k * k) / cfg.sigma**2)
        assert c0 <= 2.0 / np.pi**2 + 1.0

    def test_frame_driven_coefficient(self):
        # time-dependent a(t): deterministic decay matches the trapezoid
        # exponential by construction
        spec = TorusSpec(1.0, 2)
        cfg = make_cfg(spec, sigma=0.0, t_end=0.05)
        a = lambda t: -1.0 - np.asarray(t, dtype=float)
        paths = simulate_linear_mode(0, a, cfg, n_paths=1, psi0=0.7)
        ts = cfg.times()
        av = a(ts)
        alpha = np.sum(0.5 * (av[1:] + av[:-1]) * cfg.dt)
        assert paths[0, -1] == pytest.approx(0.7 * np.exp(alpha / cfg.eps), rel=1e-12)


class TestModeZeroMarginal:
    def test_kolmogorov_smirnov_against_scalar_euler(self):
        # K=0 field simulation vs a direct scalar Euler-Maruyama at dt/10
        delta, eps, sigma = 0.04, 1e-3, 0.02
        T0 = 0.2
        spec = TorusSpec(1.0, 0, 8)
        n = 1000
        cfg = SimConfig(eps=eps, sigma=sigma, dt=eps / 20, spec=spec,
                        t_start=-T0, t_end=T0, seed=1234,
                        record_stride=10 ** 9)
        model = normal_form(delta)
        init = SpectralField.constant(spec, np.sqrt(delta + T0 * T0))
        res = simulate_batch(cfg, model, init, None, None, traj_indices=range(n))
        end_field = res["terminal_phi0"]

        rng = np.random.default_rng(999)
        dt = eps / 200
        steps = int(round(2 * T0 / dt))
        phi = np.full(n, np.sqrt(delta + T0 * T0))
        t = -T0
        for _ in range(steps):
            xi = rng.standard_normal(n)
            phi = phi + (dt / eps) * (delta + t * t - phi**2) \
                + sigma * np.sqrt(dt / eps) * xi
            t += dt
        p = stats.ks_2samp(end_field, phi).pvalue
        assert p > 0.01


class TestTruncationCoupling:
    def test_shared_modes_make_truncation_effect_exact(self):
        # per-(trajectory, mode) streams: a K=16 run and a K=32 run share the
        # noise of their common modes, so for diagonal (linear) drift the
        # difference is exactly the tail-mode field, whose H^s size matches
        # the closed-form stationary sum
        a = -1.0
        s = 0.4
        sigma = 0.1
        n = 256
        out = {}
        for K in (16, 32):
            spec = TorusSpec(1.0, K, 96)
            cfg = SimConfig(eps=1e-2, sigma=sigma, dt=5e-4, spec=spec,
                            t_start=0.0, t_end=0.3, seed=22, record_stride=600,
                            s_monitor=s)
            res = simulate_batch(cfg, linear_drift(a), SpectralField.zero(spec),
                                 None, None, traj_indices=range(n))
            out[K] = res["perp_hs"][:, -1] ** 2
        diff = np.mean(out[32] - out[16])
        mu = lambda k: (k * np.pi) ** 2
        tail = 2 * sum((1 + k * k) ** s * sigma**2 / (2 * (mu(k) - a))
                       for k in range(17, 33))
        assert diff == pytest.approx(tail, rel=0.25)
        # H^s truncation decays like K^{2s-1}: slow but visibly subdominant
        assert diff <= 0.2 * np.mean(out[16])
