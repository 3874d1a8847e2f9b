"""Run configuration: a flat ``section.key = value`` text format over typed sections.

Defaults of the cable, network, training and controller sections are the
reference values of the method; ``data`` and ``bench`` hold desk-scale sizes.
Unknown keys are rejected and ``dumps(loads(text))`` reproduces every key.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CableSection:
    length: float = 1.0
    diameter: float = 0.01
    n_particles: int = 25
    n_keypoints: int = 13
    elastic_stiffness: float = 4e3
    damping_stiffness: float = 2e3
    bending_stiffness: float = 3e3
    particle_mass: float = 0.06
    ground_drag: float = 5.0
    tangential_drag: float = 0.1
    inner_dt: float = 1e-3
    global_scale: float = 2.0


@dataclass(frozen=True)
class GnnSection:
    window: int = 5
    message_passing: int = 10
    radius: float = 0.2
    hidden_layers: int = 2
    hidden_width: int = 128
    latent_dim: int = 32
    noise_std: float = 0.0
    init_scale: float = 0.01


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 1
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    epochs: int = 10
    ae_epochs: int = 10
    dtype: str = "float64"
    holdout: float = 0.1
    finetune_transitions: int = 2000
    finetune_epochs: int = 3
    baseline_epochs: int = 30


@dataclass(frozen=True)
class MpcSection:
    horizon: int = 5
    dt: float = 1.0
    ridge_lambda: float = 10.0
    eps_init: float = 0.05
    eta_plus: float = 0.8
    eta_minus: float = 0.4
    tau_plus: float = 1.05
    tau_minus: float = 0.95
    tolerance: float = 0.01
    max_steps: int = 60
    max_iters: int = 12
    warmup_steps: int = 3
    warmup_speed: float = 0.01


@dataclass(frozen=True)
class DataSection:
    n_trajectories: int = 200
    steps: int = 60
    max_speed: float = 0.05
    angular_scale: float = 10.0
    hold_prob: float = 0.05
    domain_randomization: bool = False
    scale_min: float = 0.1
    scale_max: float = 3.0


@dataclass(frozen=True)
class PerceptionSection:
    mu: float = 0.1
    max_iters: int = 50
    tol: float = 1e-6
    pts_per_segment: int = 20
    noise_sigma: float = 0.005
    outlier_ratio: float = 0.1


@dataclass(frozen=True)
class BenchSection:
    scenarios: tuple = ("U", "S", "Z")
    scales: tuple = (0.1, 0.5, 1.0, 2.0, 3.0)
    modes: tuple = ("direct", "servo", "hybrid", "finetune", "domrand")
    seeds: tuple = (0, 1, 2)
    rollout_steps: int = 20


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    cable: CableSection = field(default_factory=CableSection)
    gnn: GnnSection = field(default_factory=GnnSection)
    train: TrainSection = field(default_factory=TrainSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    data: DataSection = field(default_factory=DataSection)
    perception: PerceptionSection = field(default_factory=PerceptionSection)
    bench: BenchSection = field(default_factory=BenchSection)
    run: RunSection = field(default_factory=RunSection)

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with ``{"section.key": value}`` replaced; string values are parsed."""
        cfg = self
        for key, value in overrides.items():
            section, name = _split_key(key)
            sec = getattr(cfg, section)
            ftype = _field_types(type(sec))[name]
            if isinstance(value, str):
                value = _parse_value(value, ftype, key)
            cfg = replace(cfg, **{section: replace(sec, **{name: value})})
        return cfg

    def items(self):
        for f in fields(self):
            sec = getattr(self, f.name)
            for g in fields(sec):
                yield f"{f.name}.{g.name}", getattr(sec, g.name)

    def to_dict(self) -> dict:
        return dict(self.items())


def _field_types(cls) -> dict:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def _split_key(key: str):
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"config key {key!r} is not of the form section.key")
    section, name = parts
    if section not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(f"unknown config section {section!r}")
    sec_cls = type(getattr(RunConfig(), section))
    if name not in {f.name for f in fields(sec_cls)}:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def _parse_value(text: str, ftype, key: str):
    text = text.strip()
    try:
        if ftype is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is tuple:
            items = [t.strip() for t in text.split(",") if t.strip()]
            out = []
            for t in items:
                try:
                    out.append(int(t))
                except ValueError:
                    try:
                        out.append(float(t))
                    except ValueError:
                        out.append(t)
            return tuple(out)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key} ({ftype.__name__} expected)") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _split_key(key)
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return cfg.with_overrides(overrides)


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in cfg.items())


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


PAPER_SCALE = {
    "data.n_trajectories": 10000,
    "data.steps": 200,
    "train.epochs": 50,
    "train.ae_epochs": 20,
    "bench.seeds": (0, 1, 2, 3, 4),
}

# Mini-batch float32 training fits a 12k-transition run into about 25 minutes on one core.
DESK_TRAINING = {
    "train.batch_size": 16,
    "train.lr_start": 1e-3,
    "train.lr_end": 1e-5,
    "train.dtype": "float32",
    "train.epochs": 28,
    "train.ae_epochs": 3,
}


def paper_scale(cfg: RunConfig) -> RunConfig:
    logger.warning("paper-scale sizes: 10k trajectories of 200 steps; expect days of CPU time")
    return cfg.with_overrides(PAPER_SCALE)


def desk_scale(cfg: RunConfig) -> RunConfig:
    """Mini-batch training settings and a dataset of 200 training plus 22 held-out trajectories."""
    return cfg.with_overrides({**DESK_TRAINING, "data.n_trajectories": 222})


def cable_params(cfg: RunConfig):
    from .sim import CableParams
    return CableParams(**dataclasses.asdict(cfg.cable))


def mpc_config(cfg: RunConfig):
    from .mpc import MpcConfig
    m = cfg.mpc
    return MpcConfig(horizon=m.horizon, dt=m.dt, eps_init=m.eps_init, eta_plus=m.eta_plus,
                     eta_minus=m.eta_minus, tau_plus=m.tau_plus, tau_minus=m.tau_minus,
                     tolerance=m.tolerance, max_steps=m.max_steps, ridge_lambda=m.ridge_lambda,
                     window=cfg.gnn.window, max_iters=m.max_iters, warmup_steps=m.warmup_steps,
                     warmup_speed=m.warmup_speed)
