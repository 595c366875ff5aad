"""Experiment configuration: nested JSON sections mapped onto frozen dataclasses."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

ENV_VAR = "SPINODAL_KBNN_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationSection:
    steps: int = 900
    discard: int = 50
    dt: float = 2e-9
    c0_mean: float = 0.46
    c0_amplitude: float = 0.05
    newton_tol: float = 1e-6
    newton_max_iters: int = 60
    dt_backtrack_factor: float = 0.5
    max_backtracks: int = 12
    stabilization: float = 64.0
    u0_noise: float = 1e-4
    nx: int = 61
    ny: int = 61
    Lx: float = 0.01
    Ly: float = 0.01
    runs: int = 20
    bc_low: float = -1e-5
    bc_high: float = 3e-5


@dataclass(frozen=True)
class MaterialSection:
    d_c: float = 2.0
    d_e: float = 0.1
    s_e: float = 0.1
    kappa: float = 1e-6
    lambda_e: float = 1e-6
    mobility: float = 1.0
    l_e: float = 1.0


@dataclass(frozen=True)
class MechtestSection:
    frames_per_run: int = 9
    tests_per_frame: int = 335
    normal_range: float = 5e-5
    shear_range: float = 3e-4
    tol: float = 1e-9
    max_iters: int = 60
    save_perturbed: bool = False


@dataclass(frozen=True)
class FeaturesSection:
    include_outer_boundary: bool = False


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 10000
    lr0: float = 1e-3
    v_decay: float = 0.92
    n_decay: int = 100
    batch_size: int | None = None
    beta: float = 0.01
    boundary_only: bool = False
    shift_source: str = "enn"
    mnn_image: str | None = None
    enn_hidden: tuple = (76,)
    mnn_hidden: tuple = (26, 26)
    test_fraction: float = 0.10


@dataclass(frozen=True)
class SearchSection:
    stages: int = 3
    samples_per_stage: int = 25
    K: int = 5
    top_fraction: float = 0.3
    epochs_per_trial: int = 2000
    lr0: float = 1e-3
    v_decay: float = 0.7
    n_decay: int = 100
    batch_size: int | None = None
    n_hl: tuple = tuple(range(1, 11))
    n_npl: tuple = tuple(range(2, 257, 2))
    n_fpl: tuple = tuple(range(2, 33))


@dataclass(frozen=True)
class PathsSection:
    root: str = "experiment"


@dataclass(frozen=True)
class SeedsSection:
    master: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    simulation: SimulationSection = field(default_factory=SimulationSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    mechtest: MechtestSection = field(default_factory=MechtestSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    search: SearchSection = field(default_factory=SearchSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _coerce(cls, value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(value) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kw = {}
    for k, v in value.items():
        ref = getattr(defaults, k)
        if isinstance(ref, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"{where}.{k}: expected a list")
            v = tuple(v)
        elif isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected true/false")
        elif isinstance(ref, int) and ref is not None:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where}.{k}: expected an integer")
        elif isinstance(ref, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{k}: expected a number")
            v = float(v)
        kw[k] = v
    return cls(**kw)


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    sections = {}
    for f in fields(ExperimentConfig):
        if f.name in doc:
            sections[f.name] = _coerce(type(getattr(ExperimentConfig(), f.name)), doc[f.name], f.name)
    cfg = ExperimentConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    s, t = cfg.simulation, cfg.training
    if not s.steps > s.discard >= 0:
        raise ConfigError("simulation: need steps > discard >= 0")
    if s.runs < 1:
        raise ConfigError("simulation.runs must be at least 1")
    if not s.bc_low <= s.bc_high:
        raise ConfigError("simulation: bc_low must not exceed bc_high")
    if t.beta < 0:
        raise ConfigError("training.beta must be non-negative")
    if t.shift_source not in ("enn", "dns"):
        raise ConfigError("training.shift_source must be 'enn' or 'dns'")
    if t.mnn_image not in (None, "perturbed", "original"):
        raise ConfigError("training.mnn_image must be null, 'perturbed' or 'original'")
    if t.epochs < 1 or cfg.search.epochs_per_trial < 1:
        raise ConfigError("epoch counts must be positive")
    if not 0 < cfg.search.top_fraction <= 1:
        raise ConfigError("search.top_fraction must lie in (0, 1]")
    if cfg.search.K < 2:
        raise ConfigError("search.K must be at least 2")


def load(path=None) -> ExperimentConfig:
    """Read a JSON config from ``path`` or the environment; defaults when neither is set."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)
