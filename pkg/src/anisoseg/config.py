"""Experiment configuration: one strict JSON document per experiment."""
from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError
from .losses import HDLConfig
from .network import NetworkConfig
from .trainer import TrainConfig, TrainSettings
from .volume_io import SyntheticSpec


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    spec: SyntheticSpec = SyntheticSpec()
    n_train: int = Field(default=40, ge=1)
    n_val: int = Field(default=10, ge=1)
    n_test: int = Field(default=10, ge=1)


class ExperimentConfig(BaseModel):
    """Sections: data, network, loss, train, output_dir. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    data: DataSection = DataSection()
    network: NetworkConfig = NetworkConfig()
    loss: HDLConfig = HDLConfig()
    train: TrainSettings = TrainSettings()
    output_dir: str = "runs"

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump(), hdl=self.loss, network=self.network)

    def resolved(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def write_resolved(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.json"
        path.write_text(json.dumps(self.resolved(), indent=2) + "\n")
        return path


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"config {path} failed validation:\n{exc}") from exc


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema(by_alias=True)
