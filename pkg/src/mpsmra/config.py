"""Experiment configuration: dataclasses, YAML loading and validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .baselines import EmConfig, IpsConfig
from .mps import MpsConfig
from .priors import PriorSpec
from .score_model import TrainConfig

METHODS = ("mps", "em", "ips")
WORKERS_ENV = "MPSMRA_WORKERS"


class ConfigError(ValueError):
    pass


def _build(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    prior: PriorSpec
    sigma2: float = 100.0
    N_values: list[int] = field(default_factory=lambda: [10**2, 10**3, 10**4, 10**5, 10**6])
    repetitions: int = 5
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    mps: MpsConfig = field(default_factory=MpsConfig)
    em: EmConfig = field(default_factory=EmConfig)
    ips: IpsConfig = field(default_factory=IpsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None
    master_seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be >= 0")
        if not self.N_values or any(int(n) < 1 for n in self.N_values):
            raise ConfigError("N_values must be a non-empty list of positive counts")
        self.N_values = [int(n) for n in self.N_values]
        if self.repetitions < 1 or self.workers < 1:
            raise ConfigError("repetitions and workers must be positive")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")

    @property
    def L(self) -> int:
        return self.prior.L

    @property
    def n_workers(self) -> int:
        """Pool width; the environment variable overrides the file."""
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return self.workers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = self.prior.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        if "prior" not in d:
            raise ConfigError("config is missing the 'prior' section")
        try:
            prior = PriorSpec.from_dict(d.pop("prior"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"prior: {exc}") from exc
        if "L" in d:
            L = d.pop("L")
            if L != prior.L:
                raise ConfigError(f"top-level L={L} disagrees with prior.L={prior.L}")
        sections = {"mps": MpsConfig, "em": EmConfig, "ips": IpsConfig, "train": TrainConfig}
        parts = {k: _build(c, d.pop(k, None), k) for k, c in sections.items()}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        try:
            return cls(prior=prior, **parts, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
