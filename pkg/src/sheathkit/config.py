"""TOML run configuration: strict keys, defaults and validation."""

from __future__ import annotations

import re
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ParseError, ValidationError

MODES = ("equilibrium", "phase_portrait", "linear_evolve", "nonlinear_evolve", "stability_report", "gronwall_demo")


@dataclass
class ElectronSpec:
    kind: str = "boltzmann"
    n0: float = 1.0
    table: str | None = None


@dataclass
class InjectionSpec:
    center: float = 3.0
    half_width: float = 1.0
    # a number, or "neutral" for the electron density at zero potential
    mass: float | str = 1.0


@dataclass
class PhysicsConfig:
    # "lambda" in the file
    lam: float = 0.1
    phi_b: float = -1.0
    r: float = 0.0
    electrons: ElectronSpec = field(default_factory=ElectronSpec)
    injection: InjectionSpec = field(default_factory=InjectionSpec)


@dataclass
class NumericsConfig:
    grid_size: int | None = None
    nv: int = 257
    dt: float | None = None
    h_ode: float | None = None
    horizon: float = 1.0
    v_max: float | None = None
    picard_tol: float = 1e-10
    picard_max: int = 50
    newton_tol: float = 1e-10
    samples: int = 200
    portrait_nx: int = 41
    portrait_nv: int = 41


@dataclass
class PerturbationConfig:
    amplitude: float = 0.01
    x_center: float = 0.3
    x_half_width: float = 0.15
    v_center: float | None = None
    v_half_width: float = 0.5


@dataclass
class IoConfig:
    output_dir: str = "sheathkit-run"
    snapshot_times: list = field(default_factory=list)
    plot: bool = False


@dataclass
class ScanConfig:
    radii: list | None = None
    lambdas: list | None = None


@dataclass
class GronwallConfig:
    alpha: float = 0.5
    window: float = 1.0
    horizon: float = 10.0
    dt: float = 1e-3
    initial: str = "constant"


@dataclass
class RunConfig:
    mode: str = "equilibrium"
    seed: int = 0
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    io: IoConfig = field(default_factory=IoConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    gronwall: GronwallConfig = field(default_factory=GronwallConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["physics"]["lambda"] = out["physics"].pop("lam")
        return out


_RENAMES = {"lambda": "lam"}


def _find_line(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*(\[+\s*)?[\w.\"]*\b{re.escape(key)}\b")
    for k, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return k
    return None


def _coerce(name, value, default, annotation):
    ann = str(annotation)
    if value is None:
        return None
    if "bool" in ann:
        if not isinstance(value, bool):
            raise ValidationError(name, "must be a boolean")
        return value
    if "list" in ann:
        if not isinstance(value, list):
            raise ValidationError(name, "must be an array")
        return list(value)
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(name, "must be an integer")
        return value
    if "float" in ann:
        if isinstance(value, str) and "str" in ann:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(name, "must be a number")
        return float(value)
    if "str" in ann:
        if not isinstance(value, str):
            raise ValidationError(name, "must be a string")
        return value
    return value


def _fill(cls, data: dict, prefix: str, text: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for raw_key, value in data.items():
        key = _RENAMES.get(raw_key, raw_key)
        name = f"{prefix}{raw_key}"
        if key not in known:
            raise ParseError(f"unknown key '{name}'", _find_line(text, raw_key), name)
        f = known[key]
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ValidationError(name, "must be a table")
            kwargs[key] = _fill(type(default), value, name + ".", text)
        else:
            kwargs[key] = _coerce(name, value, default, f.type)
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(f"malformed TOML: {exc}", int(m.group(1)) if m else None) from exc
    cfg = _fill(RunConfig, data, "", text)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _positive(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if value is None or not value > 0:
        raise ValidationError(name, "must be positive")


def validate(cfg: RunConfig) -> None:
    if cfg.mode not in MODES:
        raise ValidationError("mode", f"must be one of {', '.join(MODES)}")
    p = cfg.physics
    _positive("physics.lambda", p.lam)
    if not p.phi_b < 0:
        raise ValidationError("physics.phi_b", "phi_b must be negative")
    if p.r < 0:
        raise ValidationError("physics.r", "must be nonnegative")
    e = p.electrons
    if e.kind not in ("boltzmann", "tabulated"):
        raise ValidationError("physics.electrons.kind", "must be 'boltzmann' or 'tabulated'")
    if e.kind == "boltzmann":
        _positive("physics.electrons.n0", e.n0)
    elif not e.table:
        raise ValidationError("physics.electrons.table", "required for tabulated electrons")
    inj = p.injection
    _positive("physics.injection.half_width", inj.half_width)
    if inj.center - inj.half_width <= 0:
        raise ValidationError("physics.injection.center", "support must lie in v > 0")
    if isinstance(inj.mass, str):
        if inj.mass != "neutral":
            raise ValidationError("physics.injection.mass", "must be a number or 'neutral'")
    elif inj.mass < 0:
        raise ValidationError("physics.injection.mass", "must be nonnegative")
    n = cfg.numerics
    if n.grid_size is not None and n.grid_size < 16:
        raise ValidationError("numerics.grid_size", "must be at least 16")
    if n.nv < 5:
        raise ValidationError("numerics.nv", "must be at least 5")
    for name in ("dt", "h_ode", "v_max"):
        _positive(f"numerics.{name}", getattr(n, name), allow_none=True)
    if n.horizon < 0:
        raise ValidationError("numerics.horizon", "must be nonnegative")
    _positive("numerics.picard_tol", n.picard_tol)
    _positive("numerics.newton_tol", n.newton_tol)
    if n.picard_max < 1:
        raise ValidationError("numerics.picard_max", "must be at least 1")
    if n.samples < 1:
        raise ValidationError("numerics.samples", "must be at least 1")
    pt = cfg.perturbation
    _positive("perturbation.x_half_width", pt.x_half_width)
    _positive("perturbation.v_half_width", pt.v_half_width)
    if any(not isinstance(t, (int, float)) or t < 0 for t in cfg.io.snapshot_times):
        raise ValidationError("io.snapshot_times", "must be nonnegative numbers")
    for name in ("radii", "lambdas"):
        vals = getattr(cfg.scan, name)
        if vals is not None and (not vals or any(not isinstance(v, (int, float)) or v < 0 for v in vals)):
            raise ValidationError(f"scan.{name}", "must be a nonempty array of nonnegative numbers")
    if cfg.scan.lambdas and any(v == 0 for v in cfg.scan.lambdas):
        raise ValidationError("scan.lambdas", "must be positive")
    g = cfg.gronwall
    if g.alpha < 0:
        raise ValidationError("gronwall.alpha", "must be nonnegative")
    _positive("gronwall.window", g.window)
    _positive("gronwall.dt", g.dt)
    if g.alpha * g.window >= 1:
        raise ValidationError("gronwall.alpha", "alpha * window must be < 1")
    if g.initial not in ("constant", "exponential", "zero"):
        raise ValidationError("gronwall.initial", "must be 'constant', 'exponential' or 'zero'")
