"""Declarative experiment configuration, validated with pydantic."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigError
from ..nn.spec import ModelSpec
from ..nn.train import TrainConfig
from ..sensitivity import HierarchyConfig
from .zoo import ZOO, build_model


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["mnist", "cifar10", "cifar100"] = "mnist"
    path: str = "data/mnist"
    train_subset: Optional[int] = Field(default=2000, ge=1)
    test_subset: Optional[int] = Field(default=1000, ge=1)
    subset_seed: int = 0


class TrainSection(_Strict):
    epochs: int = Field(default=5, ge=0)
    lr_schedule: list[tuple[int, float]] = [(0, 0.01), (3, 0.002)]
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=64, ge=2)
    weight_decay: float = Field(default=0.0, ge=0)

    @field_validator("lr_schedule")
    @classmethod
    def _schedule(cls, v):
        if not v or v[0][0] != 0:
            raise ValueError("must start at epoch 0")
        starts = [e for e, _ in v]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("epoch starts must be strictly increasing")
        if any(lr <= 0 for _, lr in v):
            raise ValueError("learning rates must be positive")
        return v


class HierarchySection(_Strict):
    r_max: float = Field(default=0.96, gt=0, lt=1)
    T: int = Field(default=4, ge=1)
    N: int = Field(default=3, ge=1)
    lam: float = Field(default=10.0, gt=0)
    gamma: float = Field(default=2 / 3, gt=0, lt=1)
    rho_min: float = Field(default=0.6, ge=-1, le=1)
    retrain_epochs_struct: int = Field(default=3, ge=0)
    reliability_epochs: int = Field(default=1, ge=0)


class PlannerSection(_Strict):
    threshold_frac: float = Field(default=0.2, gt=0, lt=1)
    ratio_step: float = Field(default=0.05, gt=0, lt=1)
    init_ratio: float = Field(default=0.10, gt=0, lt=1)
    target_overall: float = Field(default=0.5, ge=0, lt=1)
    strategy: Literal["random", "l1_norm", "l2_norm"] = "l1_norm"
    retrain_epochs: int = Field(default=3, ge=0)


class ExperimentConfig(_Strict):
    model: Union[str, dict] = "conv4-mini"
    model_options: dict = {}
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()
    hierarchy: HierarchySection = HierarchySection()
    planner: PlannerSection = PlannerSection()
    master_seed: int = Field(default=0, ge=0, lt=2 ** 63)
    output_dir: str = "runs/default"
    workers: int = Field(default=1, ge=1)

    @field_validator("model")
    @classmethod
    def _model(cls, v):
        if isinstance(v, str) and v not in ZOO:
            raise ValueError(f"unknown model {v!r}; zoo has {sorted(ZOO)}")
        return v

    @model_validator(mode="after")
    def _options(self):
        if isinstance(self.model, dict) and self.model_options:
            raise ValueError("model_options only apply to zoo models")
        return self

    def build_spec(self) -> ModelSpec:
        if isinstance(self.model, dict):
            return ModelSpec.from_dict(self.model)
        try:
            return build_model(self.model, **self.model_options)
        except TypeError as exc:
            raise ConfigError(f"model_options: {exc}") from exc

    def train_config(self, seed=None) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, lr_schedule=list(t.lr_schedule), momentum=t.momentum,
                           batch_size=t.batch_size, seed=self.master_seed if seed is None else seed,
                           weight_decay=t.weight_decay)

    def hierarchy_config(self) -> HierarchyConfig:
        return HierarchyConfig(**self.hierarchy.model_dump(), train=self.train_config())

    def planner_train_config(self, seed) -> TrainConfig:
        cfg = self.train_config(seed)
        cfg.epochs = self.planner.retrain_epochs
        cfg.lr_schedule = [(0, cfg.final_lr)]
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _where(loc):
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data, source="<config>", check_paths=True) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{source}: {_where(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config\n  " + "\n  ".join(lines)) from None
    if check_paths and not Path(cfg.dataset.path).exists():
        raise ConfigError(f"{source}: dataset.path: {cfg.dataset.path} does not exist")
    return cfg


def load_config(path, check_paths=True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1} column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}:{where} YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    return parse_config(data, source=str(path), check_paths=check_paths)
