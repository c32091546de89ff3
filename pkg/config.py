import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Experiment configuration is unusable."""


@dataclass(frozen=True)
class CellConfig:
    num_nodes: int = 6
    init_range: float = 0.04
    highway: bool = True


@dataclass(frozen=True)
class ControllerConfig:
    """Policy defaults from the ENAS reference configuration."""
    hidden_size: int = 64
    learning_rate: float = 3.5e-4
    temperature: float = 5.0
    tanh_constant: float = 2.5
    entropy_weight: float = 1e-4
    baseline_decay: float = 0.999
    grad_clip: float = 5.0
    init_range: float = 0.1


@dataclass(frozen=True)
class TrainingDefaults:
    """Fixed-architecture training loop settings for one budget."""
    max_epochs: int = 75
    patience: int = 10
    eval_batch_size: int = 64

    @classmethod
    def from_budget(cls, budget: Dict[str, int]) -> "TrainingDefaults":
        """Create defaults from a resolved budget block"""
        return cls(max_epochs=budget["max_epochs"], patience=budget["patience"])


@dataclass(frozen=True)
class DatasetPreset:
    task: Literal["classification", "regression"]
    label_range: Tuple[float, float]
    token_cap: int
    pair_token_cap: int


@dataclass(frozen=True)
class BudgetPreset:
    baseline_trials: int
    derived_trials: int
    search_epochs: int
    max_epochs: int
    patience: int
    search_patience: int
    concurrency: int


CELL_DEFAULTS = CellConfig()
CONTROLLER_DEFAULTS = ControllerConfig()

# Search phase child constants
SEARCH_LEARNING_RATE = 1e-4
SEARCH_GRAD_NORM = 0.25
DERIVE_COUNT = 10

DATASET_PRESETS: Dict[str, DatasetPreset] = {
    "mrpc": DatasetPreset("classification", (0.0, 1.0), token_cap=46, pair_token_cap=128),
    "sts-b": DatasetPreset("regression", (0.0, 5.0), token_cap=39, pair_token_cap=128),
    "sick-r": DatasetPreset("regression", (1.0, 5.0), token_cap=30, pair_token_cap=64),
    "synthetic-mrpc": DatasetPreset("classification", (0.0, 1.0), token_cap=46, pair_token_cap=128),
    "synthetic-sts": DatasetPreset("regression", (0.0, 5.0), token_cap=39, pair_token_cap=128),
    "synthetic-sick": DatasetPreset("regression", (1.0, 5.0), token_cap=30, pair_token_cap=64),
}

HIDDEN_DIMS: Dict[str, List[int]] = {
    "bert": [384, 512, 768, 1152, 1536],
    "glove": [150, 200, 300, 450, 600],
    "toy": [8, 12, 16, 24, 32],
}

BUDGET_PRESETS: Dict[str, BudgetPreset] = {
    "desk": BudgetPreset(baseline_trials=20, derived_trials=20, search_epochs=10,
                         max_epochs=20, patience=5, search_patience=10, concurrency=1),
    "full": BudgetPreset(baseline_trials=500, derived_trials=200, search_epochs=150,
                          max_epochs=75, patience=10, search_patience=10, concurrency=8),
}

LOG_FORMAT = "%(levelname)s: %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; ENAS_LOG_LEVEL wins over the default."""
    level = level or os.environ.get("ENAS_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)


def default_runs_dir() -> Path:
    load_dotenv()
    return Path(os.environ.get("ENAS_RUNS_DIR", "runs"))


class DatasetBlock(BaseModel):
    name: str = "synthetic-mrpc"
    synthetic_size: int = Field(256, ge=8)
    synthetic_seed: int = 0
    train: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    header: bool = False
    dev_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    token_cap: Optional[int] = Field(None, gt=0)

    @property
    def preset(self) -> DatasetPreset:
        key = self.name.lower()
        if key not in DATASET_PRESETS:
            raise ConfigError(f"unknown dataset '{self.name}' (known: {sorted(DATASET_PRESETS)})")
        return DATASET_PRESETS[key]

    @property
    def is_synthetic(self) -> bool:
        return self.name.lower().startswith("synthetic-")

    @model_validator(mode="after")
    def _check_files(self):
        if self.name.lower() not in DATASET_PRESETS:
            raise ValueError(f"unknown dataset '{self.name}' (known: {sorted(DATASET_PRESETS)})")
        if not self.is_synthetic:
            if not self.train or not self.test:
                raise ValueError(f"dataset '{self.name}' needs train and test files")
            for path in (self.train, self.dev, self.test):
                if path and not Path(path).exists():
                    raise ValueError(f"dataset file not found: {path}")
        return self


class EmbeddingBlock(BaseModel):
    name: str = "toy"
    kind: Literal["toy-hash", "static", "layered"] = "toy-hash"
    path: Optional[str] = None
    dim: int = Field(16, gt=0)
    key: Literal["token", "pair_position"] = "token"

    @property
    def dims_family(self) -> str:
        lowered = self.name.lower()
        if "bert" in lowered:
            return "bert"
        if "glove" in lowered:
            return "glove"
        return "toy"

    @model_validator(mode="after")
    def _check_path(self):
        if self.kind != "toy-hash":
            if not self.path:
                raise ValueError(f"{self.kind} embeddings need a path")
            if not Path(self.path).exists():
                raise ValueError(f"embedding file not found: {self.path}")
        return self


class ModelBlock(BaseModel):
    kind: Literal["BLM", "ESIM"] = "BLM"
    layer_plan: str = "L"
    highway: bool = CELL_DEFAULTS.highway
    compiled: bool = True

    @field_validator("layer_plan")
    @classmethod
    def _normalize_plan(cls, value: str) -> str:
        return " / ".join(part.strip().upper() for part in value.split("/"))


class BudgetBlock(BaseModel):
    preset: Literal["desk", "full"] = "desk"
    trials: Optional[int] = Field(None, gt=0)
    search_epochs: Optional[int] = Field(None, gt=0)
    max_epochs: Optional[int] = Field(None, gt=0)
    patience: Optional[int] = Field(None, gt=0)
    search_patience: Optional[int] = Field(None, gt=0)
    concurrency: Optional[int] = Field(None, gt=0)
    mode: Literal["tpe", "random"] = "tpe"
    derive_count: int = Field(DERIVE_COUNT, gt=0)
    controller_steps_per_epoch: int = Field(5, gt=0)
    samples_per_step: int = Field(4, gt=0)

    def resolved(self, derived: bool = False) -> Dict[str, int]:
        """Preset values with explicit fields layered on top."""
        base = BUDGET_PRESETS[self.preset]
        return {
            "trials": self.trials or (base.derived_trials if derived else base.baseline_trials),
            "search_epochs": self.search_epochs or base.search_epochs,
            "max_epochs": self.max_epochs or base.max_epochs,
            "patience": self.patience or base.patience,
            "search_patience": self.search_patience or base.search_patience,
            "concurrency": self.concurrency or base.concurrency,
        }


class ExperimentConfig(BaseModel):
    dataset: DatasetBlock = Field(default_factory=DatasetBlock)
    embedding: EmbeddingBlock = Field(default_factory=EmbeddingBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    budget: BudgetBlock = Field(default_factory=BudgetBlock)
    seed: int = 0
    out: Optional[str] = None
    memory_cap: bool = False
    refuse_overlapping_transfer: bool = True
    child_overrides: Optional[Dict[str, object]] = None

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        """Create config from a YAML file with dataset/embedding/model/budget blocks"""
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}:\n{e}") from e

    def runs_root(self) -> Path:
        return Path(self.out) if self.out else default_runs_dir()

    def snapshot(self) -> Dict[str, object]:
        return self.model_dump(mode="json")
