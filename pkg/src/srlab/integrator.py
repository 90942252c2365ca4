"""Sample paths of the slow-time stochastic PDE via per-mode exponential Euler.

The slow-time equation

    dphi = (1/eps) [Lap phi + f(t, phi)] dt + (sigma/sqrt(eps)) dW

is advanced mode by mode: the heat factor exp(-mu_k dt/eps) and the linear
stochastic convolution are applied exactly, the reaction term f explicitly,

    c_k  <-  exp(-mu_k dt/eps) c_k + psi_k(dt) F_k(t, state) + eta_k ,

with psi_k(dt) = (1 - exp(-mu_k dt/eps)) / mu_k (limit dt/eps at k = 0), F the
spectral projection of the pointwise drift, and eta_k a centred Gaussian with
the exact stochastic-convolution standard deviation of one step.  Noise is
space-time white truncated to the resolved modes: independent Wiener processes
drive every mode, one normal draw per mode per step from the trajectory's
dedicated counter-based stream.

Exit sets are monitored online after every step; crossing times are resolved
at the midpoint of the bracketing step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _streams
from .model import DriftModel
from .spectral import (SpectralField, TorusSpec, batch_from_physical,
                       batch_to_physical, hs_weights)

__all__ = [
    "SimConfig",
    "ExitSpec",
    "TrajectoryRecord",
    "NonFinite",
    "noise_increment_std",
    "step",
    "simulate",
    "simulate_batch",
    "simulate_linear_mode",
]


class NonFinite(RuntimeError):
    """A spectral coefficient became non-finite (trajectory blow-up)."""


@dataclass(frozen=True)
class SimConfig:
    """Integration setup for one family of trajectories."""

    eps: float
    sigma: float
    dt: float
    spec: TorusSpec
    t_start: float
    t_end: float
    s_monitor: float = 0.4
    seed: int = 0
    record_stride: int = 1
    stop_on_d0: bool = True
    record_fields: bool = False

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.dt <= self.eps + 1e-15:
            raise ValueError("need 0 < dt <= eps (at least one step per fast unit)")
        if self.t_start >= self.t_end:
            raise ValueError("t_start must be < t_end")
        if not 0.0 < self.s_monitor < 0.5:
            raise ValueError("s_monitor must lie in (0, 1/2)")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        n = (self.t_end - self.t_start) / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValueError("(t_end - t_start) must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.dt))

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def digest_payload(self) -> dict:
        return {"eps": self.eps, "sigma": self.sigma, "dt": self.dt,
                "L": self.spec.L, "K": self.spec.K, "n_grid": self.spec.n_grid,
                "t_start": self.t_start, "t_end": self.t_end,
                "s_monitor": self.s_monitor, "seed": self.seed,
                "record_stride": self.record_stride,
                "stop_on_d0": self.stop_on_d0}


@dataclass(frozen=True)
class ExitSpec:
    """Exit-set radii and crossing levels; absent entries are not monitored.

    h        half-width of the mean-mode tube |phi0 - phibar(t)| < h sqrt(zeta(t))
    h_perp   H^s radius of the transverse tube ||phi_perp|| < h_perp
    h_stable H^s radius of the tube around the full deterministic solution
    d_level / d0_level   downward crossing levels for phi0 (d0 > d)
    """

    h: Optional[float] = None
    h_perp: Optional[float] = None
    h_stable: Optional[float] = None
    d_level: Optional[float] = None
    d0_level: Optional[float] = None

    def __post_init__(self):
        for name in ("h", "h_perp", "h_stable", "d_level", "d0_level"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when given")
        if self.d_level is not None and self.d0_level is not None:
            if not self.d0_level > self.d_level:
                raise ValueError("d0_level must exceed d_level")

    def digest_payload(self) -> dict:
        return {k: getattr(self, k)
                for k in ("h", "h_perp", "h_stable", "d_level", "d0_level")}


@dataclass
class TrajectoryRecord:
    """Observables and hitting times of one sample path."""

    t_samples: np.ndarray
    phi0: np.ndarray
    perp_hs: np.ndarray
    tau_b0: float = np.inf
    tau_bperp: float = np.inf
    tau_b: float = np.inf
    tau_minus_d: float = np.inf
    tau_minus_d0: float = np.inf
    seed: int = 0
    traj_index: int = 0
    failed: bool = False
    terminal_phi0: float = np.nan
    field_samples: Optional[np.ndarray] = None


def noise_increment_std(k: int, dt: float, eps: float, sigma: float,
                        mu_k: float) -> float:
    """Exact one-step std of the pure-heat stochastic convolution of mode k.

    sigma * sqrt((1 - exp(-2 mu_k dt/eps)) / (2 mu_k)), with the Brownian
    limit sigma*sqrt(dt/eps) at mu_k = 0.
    """
    if dt <= 0 or eps <= 0:
        raise ValueError("dt and eps must be > 0")
    theta = dt / eps
    if mu_k == 0.0:
        return sigma * np.sqrt(theta)
    return sigma * np.sqrt(-np.expm1(-2.0 * mu_k * theta) / (2.0 * mu_k))


def _step_factors(cfg: SimConfig):
    """(decay, psi, noise_std) arrays over modes for one step of size dt."""
    mu = cfg.spec.eigenvalues
    theta = cfg.dt / cfg.eps
    decay = np.exp(-mu * theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(mu > 0, -np.expm1(-mu * theta) / np.where(mu > 0, mu, 1.0),
                       theta)
        var = np.where(mu > 0, -np.expm1(-2.0 * mu * theta) / np.where(mu > 0, 2.0 * mu, 1.0),
                       theta)
    return decay, psi, cfg.sigma * np.sqrt(var)


def step(state: SpectralField, t: float, cfg: SimConfig, model: DriftModel,
         streams: Sequence[np.random.Generator]) -> SpectralField:
    """One exponential Euler step from time t; raises NonFinite on blow-up.

    ``streams`` holds one generator per mode in k = -K..K order; exactly one
    normal is drawn from each (none when sigma = 0).
    """
    if state.spec != cfg.spec:
        raise ValueError("state cutoff does not match the configuration")
    decay, psi, noise_std = _step_factors(cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = model.f(t, batch_to_physical(state.coeffs, cfg.spec))
        drift = batch_from_physical(np.asarray(vals, dtype=float), cfg.spec)
        new = decay * state.coeffs + psi * drift
    if cfg.sigma > 0:
        xi = np.array([g.standard_normal() for g in streams])
        new = new + noise_std * xi
    if not np.all(np.isfinite(new)):
        raise NonFinite(f"non-finite coefficient after step at t={t}")
    return SpectralField(cfg.spec, new)


class _BlockNoise:
    """Per-(trajectory, mode) stream noise served in time blocks."""

    def __init__(self, master_seed, traj_indices, wavenumbers, n_steps):
        self._gens = [
            [_streams.mode_stream(master_seed, ti, k) for k in wavenumbers]
            for ti in traj_indices
        ]
        n_traj = len(traj_indices)
        n_modes = len(wavenumbers)
        per_block = max(1, int(8e6 / max(1, n_traj * n_modes)))
        self.block = min(n_steps, max(16, per_block))
        self._buf = None
        self._lo = 0
        self._hi = 0

    def draw(self, n: int) -> np.ndarray:
        """(n_traj, n_modes) standard normals for step n."""
        if not self._lo <= n < self._hi:
            size = self.block
            raw = np.empty((len(self._gens), len(self._gens[0]), size))
            for i, row in enumerate(self._gens):
                for j, g in enumerate(row):
                    raw[i, j, :] = g.standard_normal(size)
            self._buf = np.ascontiguousarray(raw.transpose(2, 0, 1))
            self._lo, self._hi = n, n + size
        return self._buf[n - self._lo]


def simulate_batch(cfg: SimConfig, model: DriftModel, init: SpectralField,
                   exits: Optional[ExitSpec], frame=None,
                   traj_indices: Sequence[int] = (0,),
                   collect_series: bool = True) -> dict:
    """Vectorised integration of several trajectories (identical initial data).

    Per-trajectory noise comes from streams keyed by (cfg.seed, trajectory
    index, mode), so the result does not depend on how trajectories are
    grouped into batches.  Returns a dict of per-trajectory outcome arrays
    plus (optionally) the recorded observable series.
    """
    spec = cfg.spec
    if init.spec != spec:
        raise ValueError("initial field does not match the torus spec")
    exits = exits or ExitSpec()
    K = spec.K
    i0 = K
    sqrt_l = np.sqrt(spec.L)
    n_traj = len(traj_indices)
    n_steps = cfg.n_steps
    times = cfg.times()

    w_perp = hs_weights(spec, cfg.s_monitor)
    w_perp = w_perp.copy()
    w_perp[i0] = 0.0

    decay, psi, noise_std = _step_factors(cfg)

    monitor_b0 = exits.h is not None
    if monitor_b0:
        if frame is None:
            raise ValueError("B0 monitoring needs an adiabatic frame")
        phibar_steps = np.asarray(frame.phibar_at(times))
        thr_b0 = exits.h * np.sqrt(np.asarray(frame.zeta_at(times)))
    monitor_b = exits.h_stable is not None
    if monitor_b:
        if frame is not None:
            ref0_steps = np.asarray(frame.phibar_at(times)) * sqrt_l
        else:
            ref0_steps = np.full(n_steps + 1, init.coeffs[i0])
        # reference transverse part: zero with a frame, the initial one without
        ref_perp = np.zeros(spec.n_modes) if frame is not None else init.coeffs.copy()
        ref_perp[i0] = 0.0
        ref_perp_zero = not np.any(ref_perp)

    state = np.tile(init.coeffs, (n_traj, 1))
    active = np.ones(n_traj, dtype=bool)
    failed = np.zeros(n_traj, dtype=bool)
    inf = np.inf
    tau_b0 = np.full(n_traj, inf)
    tau_bperp = np.full(n_traj, inf)
    tau_b = np.full(n_traj, inf)
    tau_d = np.full(n_traj, inf)
    tau_d0 = np.full(n_traj, inf)
    v0 = state[:, i0] / sqrt_l
    terminal_phi0 = v0.copy()

    n_rec = n_steps // cfg.record_stride + 1
    if collect_series:
        rec_phi0 = np.full((n_traj, n_rec), np.nan)
        rec_perp = np.full((n_traj, n_rec), np.nan)
        rec_t = times[::cfg.record_stride][:n_rec]
        rec_phi0[:, 0] = v0
        rec_perp[:, 0] = np.sqrt(np.sum(w_perp * state**2, axis=-1))
        if cfg.record_fields:
            rec_fields = np.full((n_traj, n_rec, spec.n_modes), np.nan)
            rec_fields[:, 0, :] = state

    noise = (_BlockNoise(cfg.seed, traj_indices, spec.wavenumbers, n_steps)
             if cfg.sigma > 0 else None)

    monitor_perp = exits.h_perp is not None
    # transverse norm is needed every step only when a norm monitor is active
    perp_every_step = monitor_perp or (monitor_b and ref_perp_zero)
    all_active = True

    def perp_norm_sq(arr):
        return np.sum(w_perp * arr**2, axis=-1)

    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            if not active.any():
                break
            t_n = times[n]
            vals = model.f(t_n, batch_to_physical(state, spec))
            drift = batch_from_physical(np.asarray(vals, dtype=float), spec)
            new = decay * state + psi * drift
            if noise is not None:
                new = new + noise_std * noise.draw(n)
            state = new if all_active else np.where(active[:, None], new, state)

            finite = np.isfinite(state.sum(axis=1))
            blew_up = active & ~finite
            if blew_up.any():
                failed |= blew_up
                active &= finite
                all_active = False

            t_cross = t_n + 0.5 * cfg.dt
            c0 = state[:, i0]
            np.divide(c0, sqrt_l, out=v0, where=active)
            record_now = collect_series and (n + 1) % cfg.record_stride == 0
            perp_sq = (perp_norm_sq(state)
                       if perp_every_step or record_now else None)

            if monitor_perp:
                hit = active & np.isinf(tau_bperp) & (perp_sq >= exits.h_perp**2)
                tau_bperp[hit] = t_cross
            if monitor_b0:
                dev = np.abs(v0 - phibar_steps[n + 1])
                hit = active & np.isinf(tau_b0) & (dev >= thr_b0[n + 1])
                tau_b0[hit] = t_cross
            if monitor_b:
                if ref_perp_zero:
                    db_sq = perp_sq
                else:
                    db_sq = perp_norm_sq(state - ref_perp)
                norm_b = db_sq + (c0 - ref0_steps[n + 1]) ** 2
                hit = active & np.isinf(tau_b) & (norm_b >= exits.h_stable**2)
                tau_b[hit] = t_cross
            if exits.d_level is not None:
                hit = active & np.isinf(tau_d) & (v0 <= -exits.d_level)
                tau_d[hit] = t_cross
            if exits.d0_level is not None:
                hit = active & np.isinf(tau_d0) & (v0 <= -exits.d0_level)
                tau_d0[hit] = t_cross
                if cfg.stop_on_d0 and hit.any():
                    active &= ~hit
                    all_active = False

            if record_now:
                ridx = (n + 1) // cfg.record_stride
                ok = active
                rec_phi0[ok, ridx] = v0[ok]
                rec_perp[ok, ridx] = np.sqrt(perp_sq[ok])
                if cfg.record_fields:
                    rec_fields[ok, ridx, :] = state[ok]
    terminal_phi0 = v0

    out = {
        "traj_indices": np.asarray(traj_indices, dtype=np.int64),
        "tau_b0": tau_b0, "tau_bperp": tau_bperp, "tau_b": tau_b,
        "tau_minus_d": tau_d, "tau_minus_d0": tau_d0,
        "failed": failed, "terminal_phi0": terminal_phi0,
    }
    if collect_series:
        out["t_samples"] = rec_t
        out["phi0"] = rec_phi0
        out["perp_hs"] = rec_perp
        if cfg.record_fields:
            out["fields"] = rec_fields
    return out


def simulate(cfg: SimConfig, model: DriftModel, init: SpectralField,
             exits: Optional[ExitSpec] = None, frame=None,
             traj_index: int = 0) -> TrajectoryRecord:
    """One sample path with online exit detection.

    A blow-up does not raise here: the trajectory is marked failed and its
    record truncated (``step`` raises NonFinite for single-step use).
    """
    res = simulate_batch(cfg, model, init, exits, frame,
                         traj_indices=(traj_index,), collect_series=True)
    return TrajectoryRecord(
        t_samples=res["t_samples"],
        phi0=res["phi0"][0],
        perp_hs=res["perp_hs"][0],
        tau_b0=float(res["tau_b0"][0]),
        tau_bperp=float(res["tau_bperp"][0]),
        tau_b=float(res["tau_b"][0]),
        tau_minus_d=float(res["tau_minus_d"][0]),
        tau_minus_d0=float(res["tau_minus_d0"][0]),
        seed=cfg.seed,
        traj_index=traj_index,
        failed=bool(res["failed"][0]),
        terminal_phi0=float(res["terminal_phi0"][0]),
        field_samples=res.get("fields", [None])[0] if cfg.record_fields else None,
    )


def simulate_linear_mode(k: int, a_of_t: Callable, cfg: SimConfig,
                         n_paths: int = 1, psi0: float = 0.0,
                         first_path_index: int = 0) -> np.ndarray:
    """Exact-in-distribution sampling of the scalar linear mode equation

        d psi_k = (1/eps)(-mu_k + a(t)) psi_k dt + (sigma/sqrt(eps)) dW_k .

    Per step the mean factor uses the trapezoidal integral of a(t) (exact for
    frozen coefficients) and the Gaussian increment the matching closed-form
    variance.  Returns paths sampled at the record times, shape
    (n_paths, n_rec).
    """
    mu_k = (k * np.pi / cfg.spec.L) ** 2
    times = cfg.times()
    try:
        a_vals = np.asarray(a_of_t(times), dtype=float)
        if a_vals.shape != times.shape:
            raise TypeError
    except TypeError:
        a_vals = np.array([float(a_of_t(t)) for t in times])
    abar_k = -mu_k + a_vals
    if np.max(abar_k) >= 0:
        raise ValueError(f"mode {k} is not contracting on the time range")

    dalpha = 0.5 * (abar_k[1:] + abar_k[:-1]) * cfg.dt
    m = np.exp(dalpha / cfg.eps)
    rate = -dalpha / cfg.dt
    var = cfg.sigma**2 * np.where(rate > 0, -np.expm1(2.0 * dalpha / cfg.eps)
                                  / np.where(rate > 0, 2.0 * rate, 1.0),
                                  cfg.dt / cfg.eps)

    n_steps = cfg.n_steps
    n_rec = n_steps // cfg.record_stride + 1
    out = np.empty((n_paths, n_rec))
    psi = np.full(n_paths, float(psi0))
    out[:, 0] = psi
    if cfg.sigma > 0:
        gens = [_streams.mode_stream(cfg.seed, first_path_index + i, k)
                for i in range(n_paths)]
    std = np.sqrt(var)
    block = max(16, min(n_steps, int(8e6 / max(1, n_paths))))
    lo = hi = 0
    buf = None
    for n in range(n_steps):
        if cfg.sigma > 0:
            if not lo <= n < hi:
                size = min(block, n_steps - n)
                buf = np.empty((n_paths, size))
                for i, g in enumerate(gens):
                    buf[i, :] = g.standard_normal(size)
                lo, hi = n, n + size
            psi = m[n] * psi + std[n] * buf[:, n - lo]
        else:
            psi = m[n] * psi
        if (n + 1) % cfg.record_stride == 0:
            out[:, (n + 1) // cfg.record_stride] = psi
    return out
