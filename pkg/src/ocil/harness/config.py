"""Experiment configuration: a versioned JSON document validated into dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

SCHEMA_VERSION = 1

ENVIRONMENTS = ("cartpole", "quadrotor", "rocket")
MODES = ("sysid", "imitation", "policy")

# Discretization step (s) per (mode, environment).
DEFAULT_DT = {
    "imitation": {"cartpole": 0.1, "quadrotor": 0.1, "rocket": 0.1},
    "sysid": {"cartpole": 0.05, "quadrotor": 0.1, "rocket": 0.2},
    "policy": {"cartpole": 0.05, "quadrotor": 0.1, "rocket": 0.1},
}


class ConfigError(ValueError):
    pass


@dataclass
class EstimatorConfig:
    p0: float = 10.0
    prior: list = field(default_factory=lambda: [0.5, 1.5])  # multiplicative box around theta*
    init_scale: float = 0.1  # uniform half-width for network parameters
    theta0: list | None = None
    q: float = 0.0
    r_scale: float = 10.0
    R: float | None = None  # fixed isotropic measurement variance; overrides r_scale sizing


@dataclass
class ObjectiveConfig:
    weights: str = "scalar"
    value: list = field(default_factory=lambda: [1.0])
    input_weight: float = 1.0


@dataclass
class DataConfig:
    count: int | None = None
    horizon: list | None = None
    x0_spread: float = 0.5
    amplitude: float | None = None
    reference: str = "optimal"  # policy mode: "optimal" or "policy"


@dataclass
class BaselineConfig:
    enabled: bool = False
    learning_rate: float = 1e-4


@dataclass
class ExperimentConfig:
    environment: str = "cartpole"
    mode: str = "sysid"
    schema_version: int = SCHEMA_VERSION
    dt: float | None = None
    theta_star: list | None = None
    parameterization: str = "physical"
    policy_layout: str = "n-3n-m"
    residual: str = "state"
    sigma: float = 0.0
    trials: int = 5
    seed: int = 0
    offline_epochs: int = 20
    loss_every: int = 1
    solver_tol: float = 1e-8
    record_timing: bool = True
    out: str = "runs/latest"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    data: DataConfig = field(default_factory=DataConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.dt is None and self.environment in ENVIRONMENTS and self.mode in MODES:
            self.dt = DEFAULT_DT[self.mode][self.environment]
        if self.data.count is None:
            self.data.count = 1 if self.mode == "policy" else 5
        if self.data.horizon is None:
            self.data.horizon = [30, 30] if self.mode == "policy" else [10, 20]

    @property
    def horizon(self):
        return self.data.horizon

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"estimator": EstimatorConfig, "objective": ObjectiveConfig, "data": DataConfig,
             "baseline": BaselineConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kw = {}
    for k, v in raw.items():
        if where == "" and k in _SECTIONS:
            kw[k] = _build(_SECTIONS[k], v, k)
        else:
            kw[k] = v
    return cls(**kw)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.schema_version == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}")
    need(cfg.environment in ENVIRONMENTS, f"environment must be one of {', '.join(ENVIRONMENTS)}")
    need(cfg.mode in MODES, f"mode must be one of {', '.join(MODES)}")
    need(cfg.parameterization in ("physical", "neural"), "parameterization must be physical or neural")
    need(cfg.parameterization == "physical" or cfg.mode == "sysid", "neural parameterization is for sysid only")
    need(cfg.policy_layout in ("n-3n-m", "n-3n-3n-m"), "policy_layout must be n-3n-m or n-3n-3n-m")
    need(cfg.residual in ("state", "full"), "residual must be state or full")
    need(_is_num(cfg.dt) and cfg.dt > 0, "dt must be > 0")
    need(_is_num(cfg.sigma) and cfg.sigma >= 0, "sigma must be ≥ 0")
    for name in ("trials", "offline_epochs", "loss_every", "seed"):
        v = getattr(cfg, name)
        need(isinstance(v, int) and not isinstance(v, bool), f"{name} must be an integer")
    need(cfg.trials >= 1, "trials must be ≥ 1")
    need(cfg.offline_epochs >= 0, "offline_epochs must be ≥ 0")
    need(cfg.loss_every >= 1, "loss_every must be ≥ 1")
    need(cfg.seed >= 0, "seed must be ≥ 0")
    need(_is_num(cfg.solver_tol) and cfg.solver_tol > 0, "solver_tol must be > 0")
    need(isinstance(cfg.record_timing, bool), "record_timing must be a boolean")
    need(cfg.theta_star is None or (isinstance(cfg.theta_star, list) and all(map(_is_num, cfg.theta_star))),
         "theta_star must be a list of numbers")
    e = cfg.estimator
    need(_is_num(e.p0) and e.p0 > 0, "estimator.p0 must be > 0")
    need(isinstance(e.prior, list) and len(e.prior) == 2 and all(map(_is_num, e.prior)) and 0 < e.prior[0] <= e.prior[1],
         "estimator.prior must be [low, high] with 0 < low ≤ high")
    need(_is_num(e.init_scale) and e.init_scale >= 0, "estimator.init_scale must be ≥ 0")
    need(_is_num(e.q) and e.q >= 0, "estimator.q must be ≥ 0")
    need(_is_num(e.r_scale) and e.r_scale >= 1, "estimator.r_scale must be ≥ 1")
    need(e.R is None or (_is_num(e.R) and e.R > 0), "estimator.R must be > 0")
    need(e.theta0 is None or (isinstance(e.theta0, list) and all(map(_is_num, e.theta0))),
         "estimator.theta0 must be a list of numbers")
    o = cfg.objective
    need(o.weights in ("scalar", "diag", "fixed"), "objective.weights must be scalar, diag or fixed")
    need(isinstance(o.value, list) and len(o.value) >= 1 and all(map(_is_num, o.value)) and min(o.value) > 0,
         "objective.value must be a non-empty list of positive numbers")
    need(_is_num(o.input_weight) and o.input_weight > 0, "objective.input_weight must be > 0")
    d = cfg.data
    need(isinstance(d.count, int) and d.count >= 1, "data.count must be ≥ 1")
    need(isinstance(d.horizon, list) and len(d.horizon) == 2 and all(isinstance(h, int) for h in d.horizon)
         and 1 <= d.horizon[0] <= d.horizon[1], "data.horizon must be [low, high] with 1 ≤ low ≤ high")
    need(_is_num(d.x0_spread) and d.x0_spread >= 0, "data.x0_spread must be ≥ 0")
    need(d.amplitude is None or (_is_num(d.amplitude) and d.amplitude >= 0), "data.amplitude must be ≥ 0")
    need(d.reference in ("optimal", "policy"), "data.reference must be optimal or policy")
    b = cfg.baseline
    need(isinstance(b.enabled, bool), "baseline.enabled must be a boolean")
    need(_is_num(b.learning_rate) and b.learning_rate >= 0, "baseline.learning_rate must be ≥ 0")
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, raw, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON config; unknown keys are rejected."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)
