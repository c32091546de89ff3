import pytest
from pydantic import ValidationError

from config import (
    BudgetBlock,
    ConfigError,
    DatasetBlock,
    EmbeddingBlock,
    ExperimentConfig,
    ModelBlock,
    TrainingDefaults,
)
from utils.validation import validate_candidates, validate_label, validate_layer_plan


@pytest.mark.parametrize("plan, kind, ok", [
    ("L", "BLM", True),
    ("E", "BLM", True),
    ("rnd", "BLM", True),
    ("E / L", "ESIM", True),
    ("L / RND", "ESIM", True),
    ("E / L", "BLM", False),
    ("L", "ESIM", False),
    ("X", "BLM", False),
    ("", "BLM", False),
])
def test_validate_layer_plan(plan, kind, ok):
    assert validate_layer_plan(plan, kind)[0] is ok


def test_validate_label():
    assert validate_label(4.5, "regression", (0.0, 5.0)) == (True, None)
    assert not validate_label(0.5, "classification", (0.0, 1.0))[0]
    assert not validate_label(-1.0, "regression", (0.0, 5.0))[0]


def test_validate_candidates():
    assert not validate_candidates([])[0]
    assert not validate_candidates(["a", "a"])[0]
    assert validate_candidates(["a", "b"])[0]


def test_model_block_normalizes_plan():
    assert ModelBlock(kind="ESIM", layer_plan="e/l").layer_plan == "E / L"


def test_budget_preset_with_overrides():
    budget = BudgetBlock(preset="desk", trials=3, max_epochs=4)
    resolved = budget.resolved()
    assert resolved["trials"] == 3 and resolved["max_epochs"] == 4
    assert resolved["patience"] == 5
    assert BudgetBlock(preset="full").resolved(derived=True)["trials"] == 200
    assert BudgetBlock(preset="full").resolved()["trials"] == 500


@pytest.mark.parametrize("field", ["trials", "max_epochs", "patience", "concurrency"])
@pytest.mark.parametrize("value", [0, -2])
def test_budget_rejects_non_positive_counts(field, value):
    with pytest.raises(ValidationError):
        BudgetBlock(**{field: value})


def test_training_defaults_from_budget():
    defaults = TrainingDefaults.from_budget(BudgetBlock(preset="full").resolved())
    assert defaults.max_epochs == 75 and defaults.patience == 10


def test_dataset_block_rejects_unknown_and_missing_files():
    with pytest.raises(ValueError):
        DatasetBlock(name="imdb")
    with pytest.raises(ValueError):
        DatasetBlock(name="mrpc")
    assert DatasetBlock(name="synthetic-sts").preset.task == "regression"


def test_embedding_dims_family():
    assert EmbeddingBlock(name="toy").dims_family == "toy"
    assert EmbeddingBlock(name="glove-840b", kind="toy-hash").dims_family == "glove"


def test_from_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "dataset:\n  name: synthetic-sick\n  synthetic_size: 32\n"
        "model:\n  kind: ESIM\n  layer_plan: L / L\n"
        "budget:\n  preset: desk\n  trials: 2\n"
        "seed: 7\n"
    )
    config = ExperimentConfig.from_yaml(str(path))
    assert config.dataset.name == "synthetic-sick"
    assert config.model.layer_plan == "L / L"
    assert config.seed == 7
    assert config.snapshot()["budget"]["trials"] == 2


def test_from_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(str(tmp_path / "missing.yaml"))
    path = tmp_path / "bad.yaml"
    path.write_text("budget:\n  preset: enormous\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(str(path))


def test_example_config_loads():
    config = ExperimentConfig.from_yaml("data/example_config.yaml")
    assert config.embedding.kind == "toy-hash"
    assert config.budget.preset == "desk"
