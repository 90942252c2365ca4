"""Monte Carlo estimation of exit/transition probabilities and scaling fits.

Batches fan trajectories out over worker threads in fixed-size chunks; since
every trajectory draws from its own (seed, index, mode) streams, the outcome
array is bitwise independent of the worker count.  Probabilities carry Wilson
95% intervals, which behave correctly at the extreme rates these experiments
live at.  Log-probability and log-threshold fits are plain least squares on
points with at least five successes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import _streams
from .adiabatic import AdiabaticFrame
from .integrator import ExitSpec, SimConfig, simulate_batch, simulate_linear_mode
from .model import DriftModel, Stability, equilibrium_branches, normal_form
from .spectral import SpectralField, TorusSpec

__all__ = [
    "ExitEvent",
    "ExitStatistics",
    "BatchResult",
    "FitResult",
    "wilson_interval",
    "run_batch",
    "event_probability",
    "concentration_fit",
    "transition_probability",
    "transition_study",
    "threshold_bisect",
    "scaling_exponent",
    "mode_variance_report",
    "scalar_transition_probability",
    "fit_line",
    "UnknownEvent",
    "DegeneratePoints",
    "BracketNotFound",
    "WORKERS_ENV_VAR",
    "CHUNK_SIZE",
]

WORKERS_ENV_VAR = "SRLAB_WORKERS"
# Trajectories are always grouped into chunks of this fixed size, independent
# of the worker count, so parallelism never reorders arithmetic.
CHUNK_SIZE = 256

WILSON_Z = 1.96
MIN_FIT_SUCCESSES = 5


class UnknownEvent(ValueError):
    pass


class DegeneratePoints(RuntimeError):
    """Too few usable probability points to fit a line."""


class BracketNotFound(RuntimeError):
    """No sigma bracket with p < 0.25 on one side and p > 0.75 on the other."""


class ExitEvent(enum.Enum):
    EXIT_B = "exit-b"
    EXIT_B0 = "exit-b0"
    EXIT_BPERP = "exit-bperp"
    CROSS_MINUS_D = "cross-minus-d"
    REACH_MINUS_D0 = "reach-minus-d0"
    TRANSITION = "transition"


_EVENT_FIELD = {
    ExitEvent.EXIT_B: "tau_b",
    ExitEvent.EXIT_B0: "tau_b0",
    ExitEvent.EXIT_BPERP: "tau_bperp",
    ExitEvent.CROSS_MINUS_D: "tau_minus_d",
    ExitEvent.REACH_MINUS_D0: "tau_minus_d0",
}


@dataclass(frozen=True)
class ExitStatistics:
    """Binomial estimate with Wilson 95% confidence interval."""

    p_hat: float
    ci_low: float
    ci_high: float
    n: int
    event: ExitEvent
    successes: int = 0


@dataclass(frozen=True)
class BatchResult:
    """Outcomes of n independent trajectories under one configuration."""

    n: int
    outcomes: np.ndarray  # structured array, one row per trajectory
    cfg_digest: str
    master_seed: int
    failures: tuple = ()


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    points: tuple
    details: tuple = ()


def wilson_interval(successes: int, n: int, z: float = WILSON_Z):
    """Wilson score interval; exact-coverage behaviour near p = 0 and 1."""
    if n <= 0:
        raise ValueError("need n >= 1")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return p, max(0.0, centre - half), min(1.0, centre + half)


def _n_workers(n_workers: Optional[int]) -> int:
    if n_workers is not None:
        return max(1, int(n_workers))
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _digest(cfg: SimConfig, model: DriftModel, exits: ExitSpec) -> str:
    payload = {"sim": cfg.digest_payload(), "model": model.digest_payload(),
               "exits": exits.digest_payload()}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


_OUTCOME_DTYPE = np.dtype([
    ("traj", np.int64),
    ("tau_b0", np.float64),
    ("tau_bperp", np.float64),
    ("tau_b", np.float64),
    ("tau_minus_d", np.float64),
    ("tau_minus_d0", np.float64),
    ("failed", np.bool_),
    ("terminal_phi0", np.float64),
])


def run_batch(cfg: SimConfig, model: DriftModel, init: SpectralField,
              exits: Optional[ExitSpec], frame: Optional[AdiabaticFrame],
              n: int, n_workers: Optional[int] = None) -> BatchResult:
    """n independent trajectories with per-trajectory derived seeds.

    Deterministic given cfg.seed: the chunk layout is fixed and each
    trajectory's noise streams are keyed by its global index.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    exits = exits or ExitSpec()
    chunks = [range(lo, min(lo + CHUNK_SIZE, n)) for lo in range(0, n, CHUNK_SIZE)]

    def work(idx_range):
        return simulate_batch(cfg, model, init, exits, frame,
                              traj_indices=list(idx_range), collect_series=False)

    workers = _n_workers(n_workers)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    out = np.empty(n, dtype=_OUTCOME_DTYPE)
    pos = 0
    for res in results:
        m = len(res["traj_indices"])
        sl = slice(pos, pos + m)
        out["traj"][sl] = res["traj_indices"]
        for name in ("tau_b0", "tau_bperp", "tau_b", "tau_minus_d",
                     "tau_minus_d0", "failed", "terminal_phi0"):
            out[name][sl] = res[name]
        pos += m
    failures = tuple(int(i) for i in out["traj"][out["failed"]])
    return BatchResult(n=n, outcomes=out, cfg_digest=_digest(cfg, model, exits),
                       master_seed=cfg.seed, failures=failures)


def event_probability(batch: BatchResult, event: ExitEvent,
                      horizon: float) -> ExitStatistics:
    """Fraction of trajectories with the event before the horizon, Wilson CI."""
    if not isinstance(event, ExitEvent):
        try:
            event = ExitEvent(event)
        except ValueError:
            raise UnknownEvent(f"unknown event {event!r}") from None
    o = batch.outcomes
    if event is ExitEvent.TRANSITION:
        hit = (o["tau_minus_d0"] <= horizon) & (o["tau_minus_d"] <= o["tau_minus_d0"])
    else:
        hit = o[_EVENT_FIELD[event]] <= horizon
    successes = int(np.count_nonzero(hit))
    p, lo, hi = wilson_interval(successes, batch.n)
    return ExitStatistics(p_hat=p, ci_low=lo, ci_high=hi, n=batch.n,
                          event=event, successes=successes)


def fit_line(x: Sequence[float], y: Sequence[float]) -> FitResult:
    """Ordinary least squares line through (x, y) with r^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise DegeneratePoints("need at least two points for a line")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return FitResult(slope=slope, intercept=intercept, r_squared=r2,
                     points=tuple(zip(x.tolist(), y.tolist())))


def _stable_start_field(model: DriftModel, t: float, spec: TorusSpec,
                        branch: str = "upper") -> SpectralField:
    bs = equilibrium_branches(model, t)
    roots = [r for r, s in zip(bs.roots, bs.stability) if s is Stability.STABLE]
    if not roots:
        raise ValueError(f"no stable equilibrium at t={t}")
    root = max(roots) if branch == "upper" else min(roots)
    return SpectralField.constant(spec, root)


def concentration_fit(model: DriftModel, cfg_base: SimConfig,
                      exits_template: ExitSpec, h_values: Sequence[float],
                      n: int, init: Optional[SpectralField] = None,
                      frame: Optional[AdiabaticFrame] = None,
                      n_workers: Optional[int] = None) -> FitResult:
    """Fit log p(exit from B(h)) against h^2/sigma^2; slope estimates -kappa.

    One batch per radius, all with the same master seed, so p(h) inherits the
    pathwise exit monotonicity.  Points need >= 5 successes and p_hat in
    (0, 1) to enter the fit.
    """
    if len(h_values) < 3:
        raise DegeneratePoints("need at least 3 radii")
    if max(h_values) < 2.0 * min(h_values):
        raise ValueError("h_values should span at least a factor 2")
    if init is None:
        init = _stable_start_field(model, cfg_base.t_start, cfg_base.spec)
    pts, details = [], []
    for h in h_values:
        exits = replace(exits_template, h_stable=float(h))
        batch = run_batch(cfg_base, model, init, exits, frame, n, n_workers)
        st = event_probability(batch, ExitEvent.EXIT_B, horizon=cfg_base.t_end)
        details.append((float(h), st))
        if st.successes >= MIN_FIT_SUCCESSES and 0.0 < st.p_hat < 1.0:
            pts.append((h**2 / cfg_base.sigma**2, float(np.log(st.p_hat))))
    if len(pts) < 3:
        raise DegeneratePoints(
            f"only {len(pts)} of {len(h_values)} radii gave usable p_hat")
    fit = fit_line([p[0] for p in pts], [p[1] for p in pts])
    return replace(fit, details=tuple(details))


def _default_levels(model: DriftModel, delta: float, eps: float, T0: float,
                    bracket: float = 3.0) -> tuple[float, float]:
    """d = half the minimal stable/unstable branch gap, d0 = 2d, clipped."""
    gaps = []
    for t in np.linspace(-T0, T0, 17):
        bs = equilibrium_branches(model, t, bracket=bracket)
        stab = [r for r, s in zip(bs.roots, bs.stability) if s is Stability.STABLE]
        unst = [r for r, s in zip(bs.roots, bs.stability) if s is Stability.UNSTABLE]
        if stab and unst:
            up = max(stab)
            below = [r for r in unst if r < up]
            if below:
                gaps.append(up - max(below))
    if not gaps:
        d = np.sqrt(max(delta, eps))
    else:
        d = 0.5 * min(gaps)
    d = min(d, 0.45 * bracket)
    return d, min(2.0 * d, 0.9 * bracket)


def transition_study(model: Optional[DriftModel], delta: float, eps: float,
                     sigma: float, n: int, exits: Optional[ExitSpec] = None, *,
                     K: int = 16, L: float = 1.0, n_grid: int = 0,
                     dt: Optional[float] = None, T0: Optional[float] = None,
                     seed: int = 0, h_perp: Optional[float] = None,
                     cubic: float = 0.0, n_workers: Optional[int] = None):
    """Run the avoided-bifurcation transition experiment; returns (batch, cfg, exits).

    The trajectory starts on the stable branch at -T0 and is integrated over
    [-T0, T0]; T0 defaults to max(0.2, 2.5 sqrt(delta v eps)) so the window
    always contains the bifurcation region.  Levels default to
    d = half the minimal branch gap, d0 = 2d; trajectories stop once -d0 is
    reached (the normal-form drift is unbounded below).
    """
    if model is None:
        model = normal_form(delta, cubic)
    if T0 is None:
        T0 = max(0.2, 2.5 * np.sqrt(max(delta, eps)))
    if dt is None:
        dt = eps / 20
    n_steps = int(round(2.0 * T0 / dt))
    spec = TorusSpec(L=L, K=K, n_grid=n_grid)
    cfg = SimConfig(eps=eps, sigma=sigma, dt=dt, spec=spec,
                    t_start=-T0, t_end=-T0 + n_steps * dt, seed=seed,
                    record_stride=max(1, n_steps // 64))
    if exits is None:
        d, d0 = _default_levels(model, delta, eps, T0)
        exits = ExitSpec(d_level=d, d0_level=d0, h_perp=h_perp)
    init = _stable_start_field(model, cfg.t_start, spec)
    batch = run_batch(cfg, model, init, exits, None, n, n_workers)
    return batch, cfg, exits


def transition_probability(model: Optional[DriftModel], delta: float, eps: float,
                           sigma: float, n: int,
                           exits: Optional[ExitSpec] = None,
                           **kwargs) -> ExitStatistics:
    """P(phi0 crosses -d and then reaches -d0 before the end of the window)."""
    if sigma == 0.0:
        # all sigma=0 trajectories coincide; one run decides the common outcome
        batch, cfg, _ = transition_study(model, delta, eps, 0.0, 1, exits, **kwargs)
        det = event_probability(batch, ExitEvent.TRANSITION, cfg.t_end)
        successes = n if det.successes else 0
        p, lo, hi = wilson_interval(successes, n)
        return ExitStatistics(p_hat=p, ci_low=lo, ci_high=hi, n=n,
                              event=ExitEvent.TRANSITION, successes=successes)
    batch, cfg, exits = transition_study(model, delta, eps, sigma, n, exits,
                                         **kwargs)
    return event_probability(batch, ExitEvent.TRANSITION, horizon=cfg.t_end)


def threshold_bisect(model: Optional[DriftModel], delta: float, eps: float,
                     n: int, tol: float = 0.1,
                     sigma_lo: Optional[float] = None,
                     sigma_hi: Optional[float] = None,
                     prob_fn: Optional[Callable] = None,
                     master_seed: int = 0, max_probes: int = 28,
                     **kwargs):
    """Locate sigma* with p(transition) ~ 1/2 by bisection in log sigma.

    Stops when the Wilson CI at the midpoint contains 1/2 or when the log
    bracket is narrower than tol.  Returns (sigma_star, stats, probes) where
    probes lists every (sigma, seed, stats) evaluated.
    """
    probes: list = []

    def evaluate(sig: float) -> ExitStatistics:
        probe_seed = _streams.derive_seed(master_seed, len(probes))
        if prob_fn is not None:
            st = prob_fn(sig, probe_seed)
        else:
            st = transition_probability(model, delta, eps, sig, n,
                                        seed=probe_seed, **kwargs)
        probes.append((float(sig), int(probe_seed), st))
        return st

    sc = max(delta, eps) ** 0.75
    lo = sigma_lo if sigma_lo is not None else 0.4 * sc
    hi = sigma_hi if sigma_hi is not None else 2.5 * sc

    p_lo = evaluate(lo)
    while p_lo.p_hat >= 0.25 and len(probes) < max_probes:
        lo /= 2.0
        p_lo = evaluate(lo)
    p_hi = evaluate(hi)
    while p_hi.p_hat <= 0.75 and len(probes) < max_probes:
        hi *= 2.0
        p_hi = evaluate(hi)
    if p_lo.p_hat >= 0.25 or p_hi.p_hat <= 0.75:
        raise BracketNotFound(
            f"no bracket found for delta={delta}: p({lo:.4g})={p_lo.p_hat:.3f}, "
            f"p({hi:.4g})={p_hi.p_hat:.3f}")

    st = None
    while np.log(hi / lo) >= tol and len(probes) < max_probes:
        mid = float(np.sqrt(lo * hi))
        st = evaluate(mid)
        if st.ci_low <= 0.5 <= st.ci_high:
            return mid, st, probes
        if st.p_hat < 0.5:
            lo = mid
        else:
            hi = mid
    mid = float(np.sqrt(lo * hi))
    if st is None or probes[-1][0] != mid:
        st = evaluate(mid)
    return mid, st, probes


def scaling_exponent(model: Optional[DriftModel], delta_values: Sequence[float],
                     eps: float, n: int, tol: float = 0.1,
                     master_seed: int = 0,
                     prob_fn_factory: Optional[Callable] = None,
                     **kwargs) -> FitResult:
    """Fit log sigma* against log(delta v eps); the slope estimates 3/4.

    Requires delta >= 4 eps (so delta v eps = delta) and a delta span of at
    least one decade.  ``prob_fn_factory(delta, eps)`` may inject a synthetic
    probability curve (test hook).
    """
    deltas = sorted(float(d) for d in delta_values)
    if len(deltas) < 3:
        raise DegeneratePoints("need at least 3 delta values")
    if deltas[0] < 4.0 * eps:
        raise ValueError("delta values must satisfy delta >= 4 eps")
    if deltas[-1] < 10.0 * deltas[0]:
        raise ValueError("delta values should span at least one decade")
    xs, ys, details = [], [], []
    for i, d in enumerate(deltas):
        seed_d = _streams.derive_seed(master_seed, 1000 + i)
        prob_fn = prob_fn_factory(d, eps) if prob_fn_factory is not None else None
        sig, st, probes = threshold_bisect(model, d, eps, n, tol=tol,
                                           prob_fn=prob_fn,
                                           master_seed=seed_d, **kwargs)
        xs.append(np.log(max(d, eps)))
        ys.append(np.log(sig))
        details.append((d, sig, st, tuple(probes)))
    fit = fit_line(xs, ys)
    return replace(fit, details=tuple(details))


def mode_variance_report(cfg: SimConfig, n: int, k_max: int,
                         a: float | Callable = -1.0):
    """Per-mode variance table for the linear equation against the <k>^-2 law.

    Uses the exact-in-distribution scalar sampler for each mode.  Returns
    (rows, c0_fit): one row per k with the stationary-variance estimate (at
    the final recorded time), its standard error, the sup over recorded
    times, and the exact Ornstein-Uhlenbeck value for frozen coefficients;
    c0_fit = max_k sup-variance * <k>^2 / sigma^2.
    """
    if n < 2:
        raise ValueError("need n >= 2 paths")
    a_of_t = a if callable(a) else (lambda t, _a=float(a): _a * np.ones_like(np.asarray(t, dtype=float)))
    frozen = None if callable(a) else float(a)
    rows = []
    c0 = 0.0
    for k in range(0, k_max + 1):
        mu_k = (k * np.pi / cfg.spec.L) ** 2
        paths = simulate_linear_mode(k, a_of_t, cfg, n_paths=n)
        variances = paths.var(axis=0, ddof=1)
        var_final = float(variances[-1])
        var_sup = float(variances.max())
        se_final = var_final * np.sqrt(2.0 / (n - 1))
        bracket2 = 1.0 + k * k
        ratio = var_sup * bracket2 / cfg.sigma**2
        c0 = max(c0, ratio)
        exact = (cfg.sigma**2 / (2.0 * (mu_k - frozen))
                 if frozen is not None else np.nan)
        rows.append({"k": k, "mu_k": mu_k, "var_final": var_final,
                     "se_final": float(se_final), "var_sup": var_sup,
                     "exact_var": float(exact),
                     "ratio_sup": float(ratio)})
    for row in rows:
        row["bound"] = c0 * cfg.sigma**2 / (1.0 + row["k"] ** 2)
    return rows, float(c0)


def scalar_transition_probability(delta: float, eps: float, sigma: float,
                                  n: int, d: float, d0: float, T0: float,
                                  dt: Optional[float] = None, seed: int = 0,
                                  a1: float = 1.0) -> ExitStatistics:
    """Independent dense-step Euler-Maruyama reference for the K=0 reduction.

    Simulates eps dphi = (delta + a1 t^2 - phi^2) dt + sqrt(eps) sigma dW
    from phi(-T0) on the stable branch, with its own noise streams, at a step
    defaulting to eps/200 (10x the field integrator's default resolution).
    """
    if dt is None:
        dt = eps / 200.0
    n_steps = int(round(2.0 * T0 / dt))
    sqdt = np.sqrt(dt / eps)
    phi = np.full(n, float(np.sqrt(delta + a1 * T0**2)))
    crossed_d = np.zeros(n, dtype=bool)
    reached_d0 = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    gens = [_streams.mode_stream(seed, i, 0, kind=_streams.KIND_ORACLE)
            for i in range(n)]
    block = max(16, min(n_steps, int(8e6 / max(1, n))))
    lo = hi = 0
    buf = None
    t = -T0
    for step_i in range(n_steps):
        if not active.any():
            break
        if not lo <= step_i < hi:
            size = min(block, n_steps - step_i)
            buf = np.empty((n, size))
            for i, g in enumerate(gens):
                buf[i, :] = g.standard_normal(size)
            lo, hi = step_i, step_i + size
        g_t = delta + a1 * t * t
        xi = buf[:, step_i - lo]
        upd = phi + (dt / eps) * (g_t - phi * phi) + sigma * sqdt * xi
        phi = np.where(active, upd, phi)
        crossed_d |= active & (phi <= -d)
        hit0 = active & crossed_d & (phi <= -d0)
        reached_d0 |= hit0
        active &= ~hit0
        t += dt
    successes = int(np.count_nonzero(reached_d0))
    p, lo_ci, hi_ci = wilson_interval(successes, n)
    return ExitStatistics(p_hat=p, ci_low=lo_ci, ci_high=hi_ci, n=n,
                          event=ExitEvent.TRANSITION, successes=successes)
