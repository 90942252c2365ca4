"""Run configuration: one INI-style file fully determines a run.

Sections mirror the module split (torus, model, sim, exits, adiabatic, mc,
sweep, threshold).  Parsing is strict: unknown sections or keys and malformed
values raise ConfigError with the offending section/field named.  The
serialised form emits every field, so parse -> serialize -> parse is the
identity on configurations.
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, get_args, get_origin

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_config_text",
           "serialize_config", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass
class TorusSection:
    L: float = 1.0
    K: int = 32
    n_grid: int = 0  # 0 -> max(4K, 8)


@dataclass
class ModelSection:
    kind: str = "normal-form"  # allen-cahn | normal-form | linear
    delta: float = 0.04
    cubic: float = 0.0
    a1: float = 1.0
    amplitude: float = 0.2    # allen-cahn forcing
    a: float = -1.0           # linear drift coefficient
    c: float = 0.0            # linear drift offset


@dataclass
class SimSection:
    epsilon: float = 1e-3
    sigma: float = 0.1
    dt: Optional[float] = None          # default epsilon/20
    t_start: Optional[float] = None     # default -T0 (normal form) or 0
    t_end: Optional[float] = None       # default +T0 or 1
    s_monitor: float = 0.4
    seed: int = 12345
    record_stride: int = 1
    init: str = "branch"                # branch | adiabatic | zero | const:<v>
    stop_on_d0: bool = True


@dataclass
class ExitsSection:
    h: Optional[float] = None
    h_perp: Optional[float] = None
    h_stable: Optional[float] = None
    d_level: Optional[float] = None
    d0_level: Optional[float] = None


@dataclass
class AdiabaticSection:
    t0: float = 0.2
    grid_step: Optional[float] = None   # default epsilon/10
    branch: str = "upper"
    t_points: int = 201                 # branch-scan resolution for CSV output


@dataclass
class McSection:
    n: int = 200
    event: str = "transition"
    horizon: Optional[float] = None
    k_max: int = 8


@dataclass
class SweepSection:
    sigma_values: tuple = ()
    delta_values: tuple = ()
    h_values: tuple = ()
    max_cells: Optional[int] = None


@dataclass
class ThresholdSection:
    delta_values: tuple = ()
    n: int = 400
    tol: float = 0.1
    sigma_lo: Optional[float] = None
    sigma_hi: Optional[float] = None
    synthetic: str = ""   # e.g. "logistic:prefactor=1.0,exponent=0.75,sharpness=8"


@dataclass
class RunConfig:
    torus: TorusSection = field(default_factory=TorusSection)
    model: ModelSection = field(default_factory=ModelSection)
    sim: SimSection = field(default_factory=SimSection)
    exits: ExitsSection = field(default_factory=ExitsSection)
    adiabatic: AdiabaticSection = field(default_factory=AdiabaticSection)
    mc: McSection = field(default_factory=McSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)

    def snapshot(self) -> dict:
        return asdict(self)


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(section: str, key: str, text: str, ftype):
    text = text.strip()
    origin = get_origin(ftype)
    if origin is not None and type(None) in get_args(ftype):  # Optional[...]
        if text == "":
            return None
        ftype = next(a for a in get_args(ftype) if a is not type(None))
    try:
        if ftype is float:
            return float(text)
        if ftype is int:
            return int(text)
        if ftype is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype is str:
            return text
        if ftype is tuple:
            if text == "":
                return ()
            return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None
    raise ConfigError(f"[{section}] {key}: unsupported field type {ftype}")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (torus K vs model k)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    section_names = {f.name for f in fields(RunConfig)}
    for section in cp.sections():
        if section not in section_names:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = getattr(cfg, section)
        # resolve "from __future__ import annotations" string types
        hints = typing.get_type_hints(type(target))
        for key, value in cp.items(section):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(section, key, value, hints[key]))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.model.kind not in ("allen-cahn", "normal-form", "linear"):
        raise ConfigError(f"[model] kind: unknown drift kind {cfg.model.kind!r}")
    if cfg.torus.K < 0:
        raise ConfigError("[torus] K: must be >= 0")
    if cfg.sim.epsilon <= 0:
        raise ConfigError("[sim] epsilon: must be > 0")
    if cfg.sim.sigma < 0:
        raise ConfigError("[sim] sigma: must be >= 0")
    if not 0.0 < cfg.sim.s_monitor < 0.5:
        raise ConfigError("[sim] s_monitor: must lie in (0, 1/2)")
    if cfg.mc.event not in ("exit-b", "exit-b0", "exit-bperp", "cross-minus-d",
                            "reach-minus-d0", "transition"):
        raise ConfigError(f"[mc] event: unknown event {cfg.mc.event!r}")
    init = cfg.sim.init
    if init not in ("branch", "adiabatic", "zero") and not init.startswith("const:"):
        raise ConfigError(f"[sim] init: unknown initial condition {init!r}")
    if init.startswith("const:"):
        try:
            float(init[6:])
        except ValueError:
            raise ConfigError(f"[sim] init: bad constant in {init!r}") from None


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for f in fields(RunConfig):
        section = getattr(cfg, f.name)
        out.write(f"[{f.name}]\n")
        for sf in fields(section):
            out.write(f"{sf.name} = {_format_value(getattr(section, sf.name))}\n")
        out.write("\n")
    return out.getvalue()


def parse_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=path)


def load_config(path: str) -> RunConfig:
    return parse_config(path)
