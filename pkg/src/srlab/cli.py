"""Command-line front end: subcommands, reproducible manifests, CSV emission.

Subcommands: branches | adiabatic | simulate | sweep | threshold |
variance-check.  Every command reads one config file, writes CSVs with a
fixed column order and locale-independent full-precision formatting, and
drops a JSON manifest holding the config snapshot, master seed, and output
digests; re-running with the same config reproduces every CSV bitwise
(worker count never affects results; set SRLAB_WORKERS to bound threads).

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 bracket or
fit failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._streams import derive_seed
from .adiabatic import FRAME_COLUMNS, StiffnessFailure, build_frame
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .integrator import ExitSpec, NonFinite, SimConfig, simulate
from .mc import (BracketNotFound, DegeneratePoints, ExitEvent,
                 event_probability, fit_line, mode_variance_report, run_batch,
                 threshold_bisect, transition_study, ExitStatistics)
from .model import (DriftModel, Stability, allen_cahn, equilibrium_branches,
                    linear_drift, normal_form)
from .spectral import SpectralField, TorusSpec

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_BRACKET = 3


def _fmt(v) -> str:
    """Locale-independent cell formatting; floats in full-precision scientific."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17e")
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command: str, cfg: RunConfig, seed: int):
        self.data = {
            "tool": "srlab",
            "tool_version": __version__,
            "command": command,
            "master_seed": int(seed),
            "config_snapshot": cfg.snapshot(),
            "config_text": serialize_config(cfg),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "finished_at": None,
            "outputs": {},
            "extras": {},
        }

    def add_output(self, path: Path):
        self.data["outputs"][path.name] = _sha256(path)

    def write(self, path: Path):
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                                 time.gmtime())
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_model(cfg: RunConfig) -> DriftModel:
    m = cfg.model
    if m.kind == "allen-cahn":
        return allen_cahn(m.amplitude)
    if m.kind == "normal-form":
        return normal_form(m.delta, m.cubic, m.a1)
    if m.kind == "linear":
        return linear_drift(m.a, m.c)
    raise ConfigError(f"[model] kind: unknown drift kind {m.kind!r}")


def _torus(cfg: RunConfig) -> TorusSpec:
    return TorusSpec(L=cfg.torus.L, K=cfg.torus.K, n_grid=cfg.torus.n_grid)


def _resolve_times(cfg: RunConfig) -> tuple[float, float, float]:
    """(t_start, t_end, dt) with defaults: the bifurcation window or [0, 1]."""
    s = cfg.sim
    t0 = cfg.adiabatic.t0
    if cfg.model.kind == "normal-form":
        t_start = -t0 if s.t_start is None else s.t_start
        t_end = t0 if s.t_end is None else s.t_end
    else:
        t_start = 0.0 if s.t_start is None else s.t_start
        t_end = 1.0 if s.t_end is None else s.t_end
    dt = s.epsilon / 20 if s.dt is None else s.dt
    n = max(1, int(round((t_end - t_start) / dt)))
    return t_start, t_start + n * dt, dt


def _exits(cfg: RunConfig) -> ExitSpec:
    e = cfg.exits
    return ExitSpec(h=e.h, h_perp=e.h_perp, h_stable=e.h_stable,
                    d_level=e.d_level, d0_level=e.d0_level)


def _needs_frame(cfg: RunConfig) -> bool:
    return cfg.exits.h is not None or cfg.sim.init == "adiabatic"


def _build_frame(cfg: RunConfig, model: DriftModel, t_start: float, t_end: float):
    T0 = max(cfg.adiabatic.t0, abs(t_start), abs(t_end))
    return build_frame(model, cfg.sim.epsilon, T0,
                       grid_step=cfg.adiabatic.grid_step,
                       branch=cfg.adiabatic.branch)


def _init_field(cfg: RunConfig, model: DriftModel, spec: TorusSpec,
                t_start: float, frame) -> SpectralField:
    init = cfg.sim.init
    if init == "zero":
        return SpectralField.zero(spec)
    if init.startswith("const:"):
        return SpectralField.constant(spec, float(init[6:]))
    if init == "adiabatic":
        return SpectralField.constant(spec, frame.phibar_at(t_start))
    bs = equilibrium_branches(model, t_start)
    roots = [r for r, s in zip(bs.roots, bs.stability) if s is Stability.STABLE]
    if not roots:
        raise ConfigError(f"no stable equilibrium at t={t_start} for init=branch")
    root = max(roots) if cfg.adiabatic.branch == "upper" else min(roots)
    return SpectralField.constant(spec, root)


def cmd_branches(cfg: RunConfig, out_dir: Path, seed: int, resume: bool) -> int:
    model = build_model(cfg)
    t_start, t_end, _ = _resolve_times(cfg)
    ts = np.linspace(t_start, t_end, cfg.adiabatic.t_points)
    rows = []
    for t in ts:
        bs = equilibrium_branches(model, float(t))
        row = [t]
        for i in range(3):
            if i < len(bs.roots):
                row += [bs.roots[i], bs.stability[i].value, bs.a_values[i]]
            else:
                row += [None, None, None]
        rows.append(row)
    path = out_dir / "branches.csv"
    _write_csv(path, ["t", "root_1", "stab_1", "a_1", "root_2", "stab_2",
                      "a_2", "root_3", "stab_3", "a_3"], rows)
    manifest = Manifest("branches", cfg, seed)
    manifest.add_output(path)
    manifest.write(out_dir / "branches_manifest.json")
    return EXIT_OK


def cmd_adiabatic(cfg: RunConfig, out_dir: Path, seed: int, resume: bool) -> int:
    model = build_model(cfg)
    frame = build_frame(model, cfg.sim.epsilon, cfg.adiabatic.t0,
                        grid_step=cfg.adiabatic.grid_step,
                        branch=cfg.adiabatic.branch)
    cols = frame.columns()
    rows = zip(*[cols[name] for name in FRAME_COLUMNS])
    path = out_dir / "adiabatic.csv"
    _write_csv(path, list(FRAME_COLUMNS), rows)
    manifest = Manifest("adiabatic", cfg, seed)
    manifest.add_output(path)
    manifest.write(out_dir / "adiabatic_manifest.json")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out_dir: Path, seed: int, resume: bool) -> int:
    model = build_model(cfg)
    spec = _torus(cfg)
    t_start, t_end, dt = _resolve_times(cfg)
    frame = _build_frame(cfg, model, t_start, t_end) if _needs_frame(cfg) else None
    init = _init_field(cfg, model, spec, t_start, frame)
    sim = SimConfig(eps=cfg.sim.epsilon, sigma=cfg.sim.sigma, dt=dt, spec=spec,
                    t_start=t_start, t_end=t_end, s_monitor=cfg.sim.s_monitor,
                    seed=seed, record_stride=cfg.sim.record_stride,
                    stop_on_d0=cfg.sim.stop_on_d0)
    rec = simulate(sim, model, init, _exits(cfg), frame)
    path = out_dir / "trajectory.csv"
    _write_csv(path, ["t", "phi0", "perp_hs"],
               zip(rec.t_samples, rec.phi0, rec.perp_hs))
    manifest = Manifest("simulate", cfg, seed)
    manifest.add_output(path)
    manifest.data["extras"]["hitting_times"] = {
        "tau_b0": rec.tau_b0, "tau_bperp": rec.tau_bperp, "tau_b": rec.tau_b,
        "tau_minus_d": rec.tau_minus_d, "tau_minus_d0": rec.tau_minus_d0,
    }
    manifest.data["extras"]["failed"] = rec.failed
    manifest.data["extras"]["terminal_phi0"] = rec.terminal_phi0
    manifest.write(out_dir / "simulate_manifest.json")
    if rec.failed:
        raise NonFinite("trajectory blew up; observables written up to failure")
    return EXIT_OK


_SWEEP_HEADER = ["delta", "eps", "sigma", "h", "h_perp", "n", "p_hat",
                 "ci_low", "ci_high", "event"]


def _sweep_cells(cfg: RunConfig):
    deltas = cfg.sweep.delta_values or (cfg.model.delta,)
    sigmas = cfg.sweep.sigma_values or (cfg.sim.sigma,)
    hs = cfg.sweep.h_values or (None,)
    return [(d, s, h) for d in deltas for s in sigmas for h in hs]


def _sweep_cell_stats(cfg: RunConfig, delta: float, sigma: float,
                      h: Optional[float], seed: int):
    event = ExitEvent(cfg.mc.event)
    n = cfg.mc.n
    if event is ExitEvent.TRANSITION:
        if cfg.model.kind != "normal-form":
            raise ConfigError("[mc] event: transition sweeps need the normal form")
        T0 = max(cfg.adiabatic.t0, 2.5 * np.sqrt(max(delta, cfg.sim.epsilon)))
        exits = _exits(cfg)
        if exits.d_level is None:
            exits = None
        batch, sim, exits = transition_study(
            normal_form(delta, cfg.model.cubic, cfg.model.a1), delta,
            cfg.sim.epsilon, sigma, n, exits, K=cfg.torus.K, L=cfg.torus.L,
            n_grid=cfg.torus.n_grid, dt=cfg.sim.dt, T0=T0, seed=seed)
        horizon = cfg.mc.horizon if cfg.mc.horizon is not None else sim.t_end
        return event_probability(batch, event, horizon), exits
    model = (normal_form(delta, cfg.model.cubic, cfg.model.a1)
             if cfg.model.kind == "normal-form" else build_model(cfg))
    spec = _torus(cfg)
    t_start, t_end, dt = _resolve_times(cfg)
    exits = _exits(cfg)
    if h is not None:
        field_by_event = {ExitEvent.EXIT_B: "h_stable", ExitEvent.EXIT_B0: "h",
                          ExitEvent.EXIT_BPERP: "h_perp"}
        name = field_by_event.get(event)
        if name is not None:
            exits = dataclasses.replace(exits, **{name: float(h)})
    sim = SimConfig(eps=cfg.sim.epsilon, sigma=sigma, dt=dt, spec=spec,
                    t_start=t_start, t_end=t_end, s_monitor=cfg.sim.s_monitor,
                    seed=seed, record_stride=cfg.sim.record_stride,
                    stop_on_d0=cfg.sim.stop_on_d0)
    needs_frame = exits.h is not None or cfg.sim.init == "adiabatic"
    frame = _build_frame(cfg, model, t_start, t_end) if needs_frame else None
    init = _init_field(cfg, model, spec, t_start, frame)
    batch = run_batch(sim, model, init, exits, frame, n)
    horizon = cfg.mc.horizon if cfg.mc.horizon is not None else t_end
    return event_probability(batch, event, horizon), exits


def cmd_sweep(cfg: RunConfig, out_dir: Path, seed: int, resume: bool) -> int:
    cells = _sweep_cells(cfg)
    path = out_dir / "sweep.csv"
    man_path = out_dir / "sweep_manifest.json"
    manifest = Manifest("sweep", cfg, seed)
    completed: list = []
    cell_seeds: dict = {}
    if resume and man_path.exists() and path.exists():
        old = json.loads(man_path.read_text())
        completed = old.get("extras", {}).get("completed_cells", [])
        cell_seeds = old.get("extras", {}).get("cell_seeds", {})
        if old.get("master_seed") != seed or len(completed) > len(cells):
            raise ConfigError("--resume manifest does not match this run")
        manifest.data["started_at"] = old.get("started_at",
                                              manifest.data["started_at"])
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_SWEEP_HEADER)

    budget = cfg.sweep.max_cells
    done_now = 0
    for idx, (delta, sigma, h) in enumerate(cells):
        key = f"{idx}:{_fmt(delta)}|{_fmt(sigma)}|{_fmt(h)}"
        if idx < len(completed):
            if completed[idx] != key:
                raise ConfigError("--resume grid does not match the manifest")
            continue
        if budget is not None and done_now >= budget:
            break
        cell_seed = derive_seed(seed, idx)
        stats, exits = _sweep_cell_stats(cfg, float(delta), float(sigma), h,
                                         cell_seed)
        with open(path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in (
                delta, cfg.sim.epsilon, sigma, h, exits.h_perp, stats.n,
                stats.p_hat, stats.ci_low, stats.ci_high, stats.event.value)])
        completed.append(key)
        cell_seeds[key] = cell_seed
        done_now += 1
        manifest.data["extras"]["completed_cells"] = completed
        manifest.data["extras"]["cell_seeds"] = cell_seeds
        manifest.add_output(path)
        manifest.write(man_path)

    manifest.data["extras"]["completed_cells"] = completed
    manifest.data["extras"]["cell_seeds"] = cell_seeds
    manifest.data["extras"]["all_done"] = len(completed) == len(cells)
    manifest.add_output(path)
    manifest.write(man_path)
    return EXIT_OK


def _parse_synthetic(text: str):
    """`logistic:prefactor=1.0,exponent=0.75,sharpness=8` -> callable factory."""
    if not text:
        return None
    try:
        kind, _, argstr = text.partition(":")
        kv = dict(item.split("=") for item in argstr.split(",") if item)
        pref = float(kv.get("prefactor", 1.0))
        expo = float(kv.get("exponent", 0.75))
        sharp = float(kv.get("sharpness", 8.0))
    except ValueError:
        raise ConfigError(f"[threshold] synthetic: cannot parse {text!r}") from None
    if kind != "logistic":
        raise ConfigError(f"[threshold] synthetic: unknown kind {kind!r}")

    def factory(delta: float, eps: float):
        sigma_star = pref * max(delta, eps) ** expo

        def prob(sigma: float, probe_seed: int) -> ExitStatistics:
            p = 1.0 / (1.0 + (sigma_star / sigma) ** sharp)
            return ExitStatistics(p_hat=p, ci_low=p, ci_high=p, n=0,
                                  event=ExitEvent.TRANSITION,
                                  successes=0)
        return prob

    return factory


def cmd_threshold(cfg: RunConfig, out_dir: Path, seed: int, resume: bool) -> int:
    deltas = cfg.threshold.delta_values
    if not deltas:
        raise ConfigError("[threshold] delta_values: must be non-empty")
    synthetic = _parse_synthetic(cfg.threshold.synthetic)
    if synthetic is None and cfg.model.kind != "normal-form":
        raise ConfigError("[threshold] needs the normal-form model (or synthetic)")
    eps = cfg.sim.epsilon
    rows, xs, ys = [], [], []
    probes_extras = {}
    failures = 0
    for i, delta in enumerate(deltas):
        seed_d = derive_seed(seed, 1000 + i)
        prob_fn = synthetic(delta, eps) if synthetic is not None else None
        kwargs = {}
        if prob_fn is None:
            kwargs = {"K": cfg.torus.K, "L": cfg.torus.L,
                      "n_grid": cfg.torus.n_grid, "dt": cfg.sim.dt,
                      "T0": max(cfg.adiabatic.t0,
                                2.5 * np.sqrt(max(delta, eps))),
                      "cubic": cfg.model.cubic}
        try:
            sig, st, probes = threshold_bisect(
                None, float(delta), eps, cfg.threshold.n,
                tol=cfg.threshold.tol, sigma_lo=cfg.threshold.sigma_lo,
                sigma_hi=cfg.threshold.sigma_hi, prob_fn=prob_fn,
                master_seed=seed_d, **kwargs)
        except BracketNotFound as exc:
            print(f"srlab threshold: delta={delta}: {exc}", file=sys.stderr)
            rows.append([delta, None, None, None, None, cfg.threshold.n, 0])
            failures += 1
            continue
        rows.append([delta, sig, st.p_hat, st.ci_low, st.ci_high, st.n,
                     len(probes)])
        probes_extras[str(delta)] = [
            {"sigma": s_, "seed": sd, "p_hat": stt.p_hat}
            for (s_, sd, stt) in probes]
        xs.append(math.log(max(delta, eps)))
        ys.append(math.log(sig))
    path = out_dir / "threshold.csv"
    _write_csv(path, ["delta", "sigma_star", "p_hat", "ci_low", "ci_high",
                      "n", "n_probes"], rows)
    manifest = Manifest("threshold", cfg, seed)
    manifest.add_output(path)
    manifest.data["extras"]["bisection_probes"] = probes_extras

    status = EXIT_OK
    fit_rows = []
    if len(xs) >= 2:
        fit = fit_line(xs, ys)
        fit_rows.append(["fit", fit.slope, fit.intercept, fit.r_squared,
                         None, None])
        for x, y in fit.points:
            fit_rows.append(["point", None, None, None, x, y])
        manifest.data["extras"]["fit"] = {"slope": fit.slope,
                                          "intercept": fit.intercept,
                                          "r_squared": fit.r_squared}
    else:
        status = EXIT_BRACKET
    fit_path = out_dir / "threshold_fit.csv"
    _write_csv(fit_path, ["kind", "slope", "intercept", "r_squared",
                          "log_delta", "log_sigma_star"], fit_rows)
    manifest.add_output(fit_path)
    manifest.write(out_dir / "threshold_manifest.json")
    if failures == len(deltas):
        status = EXIT_BRACKET
    return status


def cmd_variance_check(cfg: RunConfig, out_dir: Path, seed: int,
                       resume: bool) -> int:
    if cfg.model.kind != "linear":
        raise ConfigError("[model] kind: variance-check needs the linear model")
    spec = _torus(cfg)
    t_start, t_end, dt = _resolve_times(cfg)
    sim = SimConfig(eps=cfg.sim.epsilon, sigma=cfg.sim.sigma, dt=dt, spec=spec,
                    t_start=t_start, t_end=t_end, s_monitor=cfg.sim.s_monitor,
                    seed=seed, record_stride=cfg.sim.record_stride)
    rows, c0 = mode_variance_report(sim, cfg.mc.n, cfg.mc.k_max, a=cfg.model.a)
    path = out_dir / "variance.csv"
    _write_csv(path, ["k", "mu_k", "var_final", "se_final", "var_sup",
                      "exact_var", "ratio_sup", "bound", "c0_fit"],
               [[r["k"], r["mu_k"], r["var_final"], r["se_final"],
                 r["var_sup"], r["exact_var"], r["ratio_sup"], r["bound"], c0]
                for r in rows])
    manifest = Manifest("variance-check", cfg, seed)
    manifest.add_output(path)
    manifest.data["extras"]["c0_fit"] = c0
    manifest.write(out_dir / "variance_manifest.json")
    return EXIT_OK


_COMMANDS = {
    "branches": cmd_branches,
    "adiabatic": cmd_adiabatic,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "threshold": cmd_threshold,
    "variance-check": cmd_variance_check,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="srlab",
        description="Spectral Monte Carlo laboratory for slowly forced "
                    "bistable SPDEs on the torus.")
    p.add_argument("command", choices=sorted(_COMMANDS))
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the master seed from the config")
    p.add_argument("--resume", action="store_true",
                   help="skip grid cells already present in the manifest")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits itself; keep 0 for --help
        return 0 if exc.code in (0, None) else EXIT_CONFIG
    try:
        cfg = parse_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else cfg.sim.seed
        if args.seed is not None:
            cfg.sim.seed = args.seed
        return _COMMANDS[args.command](cfg, out_dir, seed, args.resume)
    except ConfigError as exc:
        print(f"srlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFinite, StiffnessFailure) as exc:
        print(f"srlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BracketNotFound, DegeneratePoints) as exc:
        print(f"srlab: {exc}", file=sys.stderr)
        return EXIT_BRACKET


if __name__ == "__main__":
    sys.exit(main())
