"""Run configuration: YAML text validated against a strict schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dispersion import GREATER_SCALE, LESSER_SCALE, GridSpec, PhysicalParams
from .errors import ConfigError
from .flownet import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Section):
    nx: int = Field(201, ge=3)
    ny: int = Field(41, ge=3)
    N: int = Field(120, ge=1)
    T: float = Field(60.0, gt=0)
    substeps_per_node: Optional[int] = Field(None, ge=1)

    def build(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.N, self.T, self.substeps_per_node)


class PhysicsSection(_Section):
    """Physical constants in km / min / tonne units."""

    kappa: float = Field(0.1, gt=0)
    S_terminal: float = Field(1.705e-4, gt=0)
    k_efold: float = Field(1.0 / 44640.0, gt=0)

    def build(self) -> PhysicalParams:
        return PhysicalParams(kappa=self.kappa, S_terminal=self.S_terminal, k_efold=self.k_efold)


class EnsembleSection(_Section):
    sources: list[tuple[float, float]] = [(2.0, 0.5), (2.0, 2.0), (3.5, 0.5), (3.5, 2.0)]
    winds: int = Field(4, ge=2)
    candidate_pool: int = Field(200, ge=2)
    validation_wind: int = Field(3, ge=0)
    test_source: tuple[float, float] = (2.75, 1.25)
    test_pool: int = Field(200, ge=1)
    observation_noise: float = Field(0.02, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.validation_wind >= self.winds:
            raise ValueError("validation_wind must index one of the selected winds")
        if self.winds > self.candidate_pool:
            raise ValueError("candidate_pool must hold at least `winds` candidates")
        if not self.sources:
            raise ValueError("at least one training source is required")
        return self


class PcaSection(_Section):
    """Explicit ranks take precedence over the error targets."""

    state_rank: Optional[int] = Field(None, ge=1)
    wind_rank: Optional[int] = Field(None, ge=1)
    state_target: float = Field(0.003, gt=0)
    wind_target: float = Field(0.0003, gt=0)


class TrainSection(_Section):
    """Desk-scale training budget: minibatched Adam over a few hundred epochs.

    ``minibatch: null`` with ``epochs: 20000``, ``learning_rate: 8e-4`` and
    ``decay_every: 1000`` gives the long full-batch schedule.
    """

    P: int = Field(25, ge=1)
    epochs: int = Field(300, ge=1)
    learning_rate: float = Field(3e-3, gt=0)
    decay_rate: float = Field(0.04, ge=0, lt=1)
    decay_every: int = Field(30, ge=1)
    width: int = Field(200, ge=1)
    depth: int = Field(2, ge=1)
    minibatch: Optional[int] = Field(64, ge=1)
    validate_every: int = Field(TrainConfig.validate_every, ge=1)

    def build(self, seed: int, **overrides) -> TrainConfig:
        kw = self.model_dump()
        kw.update(overrides)
        return TrainConfig(seed=seed, **kw)


class SensorSection(_Section):
    locations: Optional[list[tuple[float, float]]] = None
    method: Literal["bilinear", "nearest"] = "bilinear"


class PriorSection(_Section):
    gamma: Optional[float] = Field(None, gt=0)
    delta: Optional[float] = Field(None, gt=0)
    mean_start: float = 10000.0
    mean_end: float = 2000.0


class InversionSection(_Section):
    sigma: Optional[float] = Field(None, gt=0)
    bae_samples: int = Field(50, ge=2)
    tol: float = Field(1e-6, gt=0)
    max_iters: int = Field(50, ge=1)
    eig_max: int = Field(60, ge=1)
    eig_tol: float = Field(0.01, ge=0)
    posterior_samples: int = Field(50, ge=1)


class StudySection(_Section):
    P_values: list[int] = [1, 5, 15, 25]
    sweep_seeds: list[int] = [0, 1, 2]
    widths: list[int] = []
    depths: list[int] = []
    restarts: int = Field(20, ge=1)
    restart_scale: float = Field(0.5, gt=0)
    cluster_tol: float = Field(0.01, gt=0)

    @field_validator("P_values", "widths", "depths")
    @classmethod
    def _positive(cls, v):
        if any(int(x) < 1 for x in v):
            raise ValueError("sweep values must be >= 1")
        return v


class SeedSection(_Section):
    wind_pool: int = 7
    test_pool: int = 11
    noise: int = 13
    train: int = 0
    bae: int = 17
    lanczos: int = 19
    posterior: int = 23
    restarts: int = 29


class RunConfig(_Section):
    case: Literal["lesser", "greater"] = "lesser"
    variability_scale: Optional[float] = Field(None, gt=0, le=1)
    grid: GridSection = GridSection()
    physics: PhysicsSection = PhysicsSection()
    ensemble: EnsembleSection = EnsembleSection()
    pca: PcaSection = PcaSection()
    train: TrainSection = TrainSection()
    sensors: SensorSection = SensorSection()
    prior: PriorSection = PriorSection()
    inversion: InversionSection = InversionSection()
    study: StudySection = StudySection()
    seeds: SeedSection = SeedSection()

    @property
    def scale(self) -> float:
        if self.variability_scale is not None:
            return self.variability_scale
        return LESSER_SCALE if self.case == "lesser" else GREATER_SCALE

    @property
    def sigma(self) -> float:
        if self.inversion.sigma is not None:
            return self.inversion.sigma
        return 5.0 if self.case == "lesser" else 8.5

    def digest(self) -> str:
        """Stable hash of the fully resolved configuration."""
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Shift every stage seed by ``seed``; 0 leaves the config unchanged."""
        if not seed:
            return self
        seeds = {k: v + seed for k, v in self.seeds.model_dump().items()}
        return self.model_copy(update={"seeds": SeedSection(**seeds)})


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults when ``path`` is None) and validate it."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    if overrides:
        data = {**data, **overrides}
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
