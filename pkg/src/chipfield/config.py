"""Run configuration: JSON ingestion, validation, and object construction.

A config file is a JSON object with optional sections `grid`, `control`,
`capacitance`, `initial`, `flow`, `particles` and top-level `seed`, `beta`,
`out_dir`.  Every missing value takes the shipped default (the linear-policy
experiment on the 20x20 grid); unknown keys are rejected with the offending
path in the message.  `beta` accepts the string "inf" for the deterministic
(noise-free) limit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .grid import DensityField, Grid2D, ScalarField, field_from_function, normalize
from .model import CapacitanceModel, ControlPolicy


def _check_keys(d: dict, path: str, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {path}.{name}" if path else f"unknown config key {name}")


def _num(d: dict, key: str, path: str, default, minimum=None, strict_min=False,
         integer=False, allow_inf=False):
    if key not in d:
        return default
    v = d[key]
    where = f"{path}.{key}" if path else key
    if allow_inf and v == "inf":
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if integer:
        if int(v) != v:
            raise ConfigError(f"{where}: expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
    if minimum is not None:
        if strict_min and not v > minimum:
            raise ConfigError(f"{where}: must be > {minimum}, got {v!r}")
        if not strict_min and not v >= minimum:
            raise ConfigError(f"{where}: must be >= {minimum}, got {v!r}")
    return v


def _pair(d: dict, key: str, path: str, default):
    if key not in d:
        return default
    v = d[key]
    where = f"{path}.{key}" if path else key
    if not isinstance(v, (list, tuple)) or len(v) != 2 or any(
        isinstance(x, bool) or not isinstance(x, (int, float)) for x in v
    ):
        raise ConfigError(f"{where}: expected a pair of numbers, got {v!r}")
    return (float(v[0]), float(v[1]))


@dataclass(frozen=True)
class GridConfig:
    x_min: float = -4.0
    x_max: float = 4.0
    y_min: float = -4.0
    y_max: float = 4.0
    nx: int = 20
    ny: int = 20


@dataclass(frozen=True)
class ControlConfig:
    gains: tuple[float, float] = (8.5e-3, -1e-2)  # V/mm
    u_min: float = -400.0
    u_max: float = 400.0


@dataclass(frozen=True)
class CapacitanceConfig:
    delta: float = 0.01  # half electrode pitch, mm (10 micrometers)
    n_terms: int = 3
    seed: int | None = None  # None: derive from the master seed
    cc_terms: tuple[tuple[float, float], ...] | None = None
    ce_terms: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class InitialConfig:
    mean: tuple[float, float] = (0.5, 0.5)
    cov: tuple[tuple[float, float], tuple[float, float]] = ((0.1, 0.0), (0.0, 0.1))


@dataclass(frozen=True)
class FlowConfig:
    scheme: str = "jko"
    tau: float = 0.1
    dt: float = 0.01
    steps: int = 100
    eps: float | None = None  # None: h^2/4 at runtime
    jko_tol: float = 1e-9
    snapshot_every: int = 10


@dataclass(frozen=True)
class ParticlesConfig:
    n: int = 500
    dt: float = 0.01
    steps: int = 100
    fd_step: float = 1e-3
    drift_mode: str = "meanfield"
    record_every: int = 10
    metric_eps: float = 5e-3  # entropic eps (mm^2) of the consistency metric
    n_sweep: tuple[int, ...] | None = None
    n_seeds: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 20240
    beta: float = 1.0
    out_dir: str = "runs"
    grid: GridConfig = field(default_factory=GridConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    capacitance: CapacitanceConfig = field(default_factory=CapacitanceConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    particles: ParticlesConfig = field(default_factory=ParticlesConfig)


def _parse_grid(d: dict) -> GridConfig:
    _check_keys(d, "grid", {"x_min", "x_max", "y_min", "y_max", "nx", "ny"})
    dflt = GridConfig()
    cfg = GridConfig(
        x_min=_num(d, "x_min", "grid", dflt.x_min),
        x_max=_num(d, "x_max", "grid", dflt.x_max),
        y_min=_num(d, "y_min", "grid", dflt.y_min),
        y_max=_num(d, "y_max", "grid", dflt.y_max),
        nx=_num(d, "nx", "grid", dflt.nx, minimum=3, integer=True),
        ny=_num(d, "ny", "grid", dflt.ny, minimum=3, integer=True),
    )
    if not cfg.x_min < cfg.x_max:
        raise ConfigError(f"grid.x_min: must be < grid.x_max, got [{cfg.x_min}, {cfg.x_max}]")
    if not cfg.y_min < cfg.y_max:
        raise ConfigError(f"grid.y_min: must be < grid.y_max, got [{cfg.y_min}, {cfg.y_max}]")
    return cfg


def _parse_control(d: dict) -> ControlConfig:
    _check_keys(d, "control", {"gains", "u_min", "u_max"})
    dflt = ControlConfig()
    cfg = ControlConfig(
        gains=_pair(d, "gains", "control", dflt.gains),
        u_min=_num(d, "u_min", "control", dflt.u_min),
        u_max=_num(d, "u_max", "control", dflt.u_max),
    )
    if not cfg.u_min < cfg.u_max:
        raise ConfigError(f"control.u_min: must be < control.u_max, got [{cfg.u_min}, {cfg.u_max}]")
    return cfg


def _parse_terms(d: dict, key: str):
    if key not in d or d[key] is None:
        return None
    v = d[key]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"capacitance.{key}: expected a nonempty list of [amplitude, scale] pairs")
    terms = []
    for i, pair in enumerate(v):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"capacitance.{key}[{i}]: expected [amplitude, scale]")
        a, c = float(pair[0]), float(pair[1])
        if a < 0:
            raise ConfigError(f"capacitance.{key}[{i}]: amplitude must be >= 0, got {a!r}")
        if c <= 0:
            raise ConfigError(f"capacitance.{key}[{i}]: scale must be > 0, got {c!r}")
        terms.append((a, c))
    if not any(a > 0 for a, _ in terms):
        raise ConfigError(f"capacitance.{key}: at least one amplitude must be > 0")
    return tuple(terms)


def _parse_capacitance(d: dict) -> CapacitanceConfig:
    _check_keys(d, "capacitance", {"delta", "n_terms", "seed", "cc_terms", "ce_terms"})
    dflt = CapacitanceConfig()
    seed = d.get("seed", dflt.seed)
    if seed is not None:
        seed = _num(d, "seed", "capacitance", dflt.seed, minimum=0, integer=True)
    return CapacitanceConfig(
        delta=_num(d, "delta", "capacitance", dflt.delta, minimum=0, strict_min=True),
        n_terms=_num(d, "n_terms", "capacitance", dflt.n_terms, minimum=1, integer=True),
        seed=seed,
        cc_terms=_parse_terms(d, "cc_terms"),
        ce_terms=_parse_terms(d, "ce_terms"),
    )


def _parse_initial(d: dict) -> InitialConfig:
    _check_keys(d, "initial", {"mean", "cov"})
    dflt = InitialConfig()
    mean = _pair(d, "mean", "initial", dflt.mean)
    cov = dflt.cov
    if "cov" in d:
        v = d["cov"]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            cov = ((float(v), 0.0), (0.0, float(v)))
        elif (
            isinstance(v, (list, tuple)) and len(v) == 2
            and all(isinstance(r, (list, tuple)) and len(r) == 2 for r in v)
        ):
            cov = (
                (float(v[0][0]), float(v[0][1])),
                (float(v[1][0]), float(v[1][1])),
            )
        else:
            raise ConfigError(f"initial.cov: expected a scalar or 2x2 matrix, got {v!r}")
    arr = np.asarray(cov)
    if not np.allclose(arr, arr.T, atol=1e-12) or np.any(np.linalg.eigvalsh(arr) <= 0):
        raise ConfigError("initial.cov: must be symmetric positive definite")
    return InitialConfig(mean=mean, cov=cov)


def _parse_flow(d: dict) -> FlowConfig:
    _check_keys(d, "flow", {"scheme", "tau", "dt", "steps", "eps", "jko_tol", "snapshot_every"})
    dflt = FlowConfig()
    scheme = d.get("scheme", dflt.scheme)
    if scheme not in ("jko", "explicit_fd"):
        raise ConfigError(f"flow.scheme: must be 'jko' or 'explicit_fd', got {scheme!r}")
    eps = d.get("eps", dflt.eps)
    if eps is not None:
        eps = _num(d, "eps", "flow", dflt.eps, minimum=0, strict_min=True)
    return FlowConfig(
        scheme=scheme,
        tau=_num(d, "tau", "flow", dflt.tau, minimum=0, strict_min=True),
        dt=_num(d, "dt", "flow", dflt.dt, minimum=0, strict_min=True),
        steps=_num(d, "steps", "flow", dflt.steps, minimum=0, integer=True),
        eps=eps,
        jko_tol=_num(d, "jko_tol", "flow", dflt.jko_tol, minimum=0, strict_min=True),
        snapshot_every=_num(d, "snapshot_every", "flow", dflt.snapshot_every, minimum=0, integer=True),
    )


def _parse_particles(d: dict) -> ParticlesConfig:
    _check_keys(d, "particles", {
        "n", "dt", "steps", "fd_step", "drift_mode", "record_every",
        "metric_eps", "n_sweep", "n_seeds",
    })
    dflt = ParticlesConfig()
    mode = d.get("drift_mode", dflt.drift_mode)
    if mode not in ("meanfield", "empirical"):
        raise ConfigError(f"particles.drift_mode: must be 'meanfield' or 'empirical', got {mode!r}")
    sweep = d.get("n_sweep", dflt.n_sweep)
    if sweep is not None:
        if not isinstance(sweep, (list, tuple)) or not sweep or any(
            isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in sweep
        ):
            raise ConfigError(f"particles.n_sweep: expected a list of positive integers, got {sweep!r}")
        sweep = tuple(int(x) for x in sweep)
    return ParticlesConfig(
        n=_num(d, "n", "particles", dflt.n, minimum=1, integer=True),
        dt=_num(d, "dt", "particles", dflt.dt, minimum=0, strict_min=True),
        steps=_num(d, "steps", "particles", dflt.steps, minimum=0, integer=True),
        fd_step=_num(d, "fd_step", "particles", dflt.fd_step, minimum=0, strict_min=True),
        drift_mode=mode,
        record_every=_num(d, "record_every", "particles", dflt.record_every, minimum=0, integer=True),
        metric_eps=_num(d, "metric_eps", "particles", dflt.metric_eps, minimum=0, strict_min=True),
        n_sweep=sweep,
        n_seeds=_num(d, "n_seeds", "particles", dflt.n_seeds, minimum=1, integer=True),
    )


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(d).__name__}")
    _check_keys(d, "", {"seed", "beta", "out_dir", "grid", "control", "capacitance",
                        "initial", "flow", "particles"})
    for section in ("grid", "control", "capacitance", "initial", "flow", "particles"):
        if section in d and not isinstance(d[section], dict):
            raise ConfigError(f"{section}: expected an object")
    out_dir = d.get("out_dir", RunConfig().out_dir)
    if not isinstance(out_dir, str):
        raise ConfigError(f"out_dir: expected a string, got {out_dir!r}")
    return RunConfig(
        seed=_num(d, "seed", "", RunConfig().seed, minimum=0, integer=True),
        beta=_num(d, "beta", "", RunConfig().beta, minimum=0, strict_min=True, allow_inf=True),
        out_dir=out_dir,
        grid=_parse_grid(d.get("grid", {})),
        control=_parse_control(d.get("control", {})),
        capacitance=_parse_capacitance(d.get("capacitance", {})),
        initial=_parse_initial(d.get("initial", {})),
        flow=_parse_flow(d.get("flow", {})),
        particles=_parse_particles(d.get("particles", {})),
    )


def parse_config(path) -> RunConfig:
    """Load and validate a JSON config file; missing values take the defaults."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return config_from_dict(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    """All-defaults-materialized dict form; round-trips through config_from_dict."""
    d = asdict(cfg)
    if math.isinf(d["beta"]):
        d["beta"] = "inf"
    for key in ("cc_terms", "ce_terms"):
        if d["capacitance"][key] is not None:
            d["capacitance"][key] = [list(t) for t in d["capacitance"][key]]
    d["control"]["gains"] = list(d["control"]["gains"])
    d["initial"]["mean"] = list(d["initial"]["mean"])
    d["initial"]["cov"] = [list(r) for r in d["initial"]["cov"]]
    if d["particles"]["n_sweep"] is not None:
        d["particles"]["n_sweep"] = list(d["particles"]["n_sweep"])
    return d


# -- construction of model objects from a validated config --------------------


def make_grid(cfg: RunConfig) -> Grid2D:
    g = cfg.grid
    return Grid2D(x_min=g.x_min, x_max=g.x_max, y_min=g.y_min, y_max=g.y_max, nx=g.nx, ny=g.ny)


def make_policy(cfg: RunConfig) -> ControlPolicy:
    c = cfg.control
    return ControlPolicy(gains=c.gains, u_min=c.u_min, u_max=c.u_max)


def make_capacitance_models(cfg: RunConfig) -> tuple[CapacitanceModel, CapacitanceModel]:
    """Build (cc, ce) kernels: explicit terms when given, else seeded uniform draws."""
    cap = cfg.capacitance
    seed = cap.seed if cap.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    # cc terms are drawn before ce terms so explicit overrides do not shift the stream
    drawn_cc = tuple((float(rng.uniform()), float(rng.uniform())) for _ in range(cap.n_terms))
    drawn_ce = tuple((float(rng.uniform()), float(rng.uniform())) for _ in range(cap.n_terms))
    cc = CapacitanceModel(terms=cap.cc_terms or drawn_cc, delta=cap.delta, role="cc")
    ce = CapacitanceModel(terms=cap.ce_terms or drawn_ce, delta=cap.delta, role="ce")
    return cc, ce


def make_initial_density(cfg: RunConfig, grid: Grid2D) -> DensityField:
    """Gaussian bump sampled at the nodes and renormalized on the grid."""
    mean = np.asarray(cfg.initial.mean)
    cov = np.asarray(cfg.initial.cov)
    prec = np.linalg.inv(cov)

    def gauss(X, Y):
        dx = X - mean[0]
        dy = Y - mean[1]
        q = prec[0, 0] * dx**2 + 2 * prec[0, 1] * dx * dy + prec[1, 1] * dy**2
        return np.exp(-0.5 * q)

    return normalize(field_from_function(grid, gauss))
