import numpy as np
import pytest

from config import ControllerConfig
from models.cell import ActivationOp, parse, read_architecture_file
from models.controller import ControllerPolicy
from models.sentpair import ENAS, LSTM, RANDOM, LayerSpec
from models.tensor import LossKind
from services.nas_engine import (
    DERIVED_FILE,
    METRICS_FILE,
    DivergenceError,
    SearchConfig,
    TrialSpec,
    apply_search_memory_cap,
    build_model_spec,
    controller_phase,
    derive_architectures,
    init_search_state,
    layers_for_plan,
    run_search,
    train_fixed,
    train_shared_epoch,
)
from tests.conftest import small_splits
from utils.data_io import DatasetSplits, make_synthetic, split
from utils.embeddings import ToyHashEmbedding

ROW_1 = parse("Tanh 0:Relu 0:Relu 0:Relu 0:Relu 0:Relu")
CHILD = TrialSpec(batch_size=8, hidden_dim=4)


def _search_config(**extra):
    values = dict(max_epochs=2, patience=5, controller_steps_per_epoch=2, samples_per_step=2,
                  derive_count=3, child=CHILD, seed=4)
    values.update(extra)
    return SearchConfig(**values)


def _search_spec(provider, task="regression"):
    return build_model_spec("BLM", [LayerSpec(ENAS)], CHILD, provider, task)


def _snapshot(params):
    return {name: p.data.copy() for name, p in params.items()}


def test_trial_spec_from_params():
    trial = TrialSpec.from_params({"batch_size": 16, "hidden_dim": 8, "unknown": 1}, seed=3)
    assert (trial.batch_size, trial.hidden_dim, trial.seed) == (16, 8, 3)
    assert trial.loss_kind("classification") is LossKind.CROSS_ENTROPY
    assert TrialSpec(loss="mae").loss_kind("regression") is LossKind.MAE
    with pytest.raises(ValueError):
        TrialSpec(loss="cross_entropy").loss_kind("regression")


def test_search_memory_cap():
    capped = apply_search_memory_cap(TrialSpec(batch_size=64, hidden_dim=16), "toy")
    assert (capped.batch_size, capped.hidden_dim) == (32, 12)
    smallest = apply_search_memory_cap(TrialSpec(batch_size=16, hidden_dim=8), "toy")
    assert (smallest.batch_size, smallest.hidden_dim) == (16, 8)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(patience=0)
    with pytest.raises(ValueError):
        SearchConfig(derive_count=0)


def test_layers_for_plan():
    layers = layers_for_plan(("E", "L"), ROW_1)
    assert layers == [LayerSpec(ENAS, ROW_1), LayerSpec(LSTM)]
    assert layers_for_plan(("L",), None) == [LayerSpec(LSTM)]
    with pytest.raises(ValueError):
        layers_for_plan((RANDOM,), None)


def test_shared_phase_leaves_controller_and_unused_weights(toy_provider, regression_splits):
    state = init_search_state(_search_config(), _search_spec(toy_provider))
    policy_before = _snapshot(state.policy.parameters())
    params = state.model.parameters()
    before = _snapshot(params)

    stats = train_shared_epoch(state, regression_splits.train.examples, toy_provider, 8, LossKind.MSE,
                               sampler=lambda s: ROW_1)
    assert stats["examples"] == len(regression_splits.train)
    for name, value in _snapshot(state.policy.parameters()).items():
        np.testing.assert_array_equal(value, policy_before[name])

    after = _snapshot(params)
    for direction in (0, 1):
        for j, l in [(1, 2), (2, 5), (3, 4)]:
            for store in ("W_h", "W_c"):
                name = f"rnn.0.{direction}.{store}.{j}_{l}"
                np.testing.assert_array_equal(after[name], before[name])
        changed = f"rnn.0.{direction}.W_h.0_1"
        assert not np.array_equal(after[changed], before[changed])


def test_controller_phase_leaves_child_weights(toy_provider):
    config = _search_config(controller=ControllerConfig(learning_rate=0.05))
    state = init_search_state(config, _search_spec(toy_provider))
    child_before = _snapshot(state.model.parameters())
    policy_before = _snapshot(state.policy.parameters())

    def reward(arch):
        return 1.0 if arch.node0_op == ActivationOp.RELU else 0.0

    stats = controller_phase(state, reward, steps=3, samples_per_step=4)
    assert set(stats) == {"mean_reward", "max_reward", "baseline"}
    for name, value in _snapshot(state.model.parameters()).items():
        np.testing.assert_array_equal(value, child_before[name])
    assert any(not np.array_equal(v, policy_before[k]) for k, v in _snapshot(state.policy.parameters()).items())


def test_regression_rewards_must_be_correlations(toy_provider):
    state = init_search_state(_search_config(), _search_spec(toy_provider))
    with pytest.raises(ValueError):
        controller_phase(state, lambda arch: 2.0, steps=1, samples_per_step=2, task="regression")
    stats = controller_phase(state, lambda arch: 2.0, steps=1, samples_per_step=2, task="classification")
    assert stats["mean_reward"] == 2.0


def test_derive_returns_unique_architectures():
    rng = np.random.default_rng(0)
    policy = ControllerPolicy(rng)
    derived = derive_architectures(policy, rng, 10)
    assert len(derived) == 10 and len(set(derived)) == 10


def test_derive_stops_when_space_is_exhausted():
    rng = np.random.default_rng(0)
    policy = ControllerPolicy(rng, num_nodes=2)
    derived = derive_architectures(policy, rng, 20, max_attempts=3000)
    assert len(derived) == 16


def test_run_search_writes_derived_file(tmp_path, toy_provider, regression_splits):
    state, derived = run_search(_search_config(), regression_splits, toy_provider,
                                _search_spec(toy_provider), tmp_path)
    assert state.epoch == 2
    assert len(derived) == 3 and len(set(derived)) == 3
    assert read_architecture_file(tmp_path / DERIVED_FILE) == derived
    assert len((tmp_path / METRICS_FILE).read_text().splitlines()) == 2

    again, same = run_search(_search_config(), regression_splits, toy_provider, _search_spec(toy_provider), tmp_path)
    assert same == derived and again.epoch == 2


def test_interrupted_search_resumes_identically(tmp_path, toy_provider, regression_splits):
    _, straight = run_search(_search_config(max_epochs=3), regression_splits, toy_provider,
                             _search_spec(toy_provider), tmp_path / "straight")

    resumed_dir = tmp_path / "resumed"
    run_search(_search_config(max_epochs=1), regression_splits, toy_provider, _search_spec(toy_provider), resumed_dir)
    (resumed_dir / DERIVED_FILE).unlink()
    state, resumed = run_search(_search_config(max_epochs=3), regression_splits, toy_provider,
                                _search_spec(toy_provider), resumed_dir)
    assert state.epoch == 3
    assert [h["epoch"] for h in state.history] == [1, 2, 3]
    assert resumed == straight


def test_search_early_stops_on_flat_reward(toy_provider):
    splits = small_splits("classification", n=32)
    config = _search_config(max_epochs=20, patience=1)
    state, _ = run_search(config, splits, toy_provider, _search_spec(toy_provider, "classification"))
    assert len(state.reward_history) == state.epoch
    if state.epoch < 20:
        assert state.epochs_since_best == 1
        assert state.reward_history[-1] <= max(state.reward_history[:-1])


class _ExplodingEmbedding(ToyHashEmbedding):
    def vectors(self, keys):
        return np.full((len(keys), self.dim), np.inf)


def test_non_finite_training_is_divergence(regression_splits):
    provider = _ExplodingEmbedding(4)
    with pytest.raises(DivergenceError):
        train_fixed("BLM", [LayerSpec(LSTM)], TrialSpec(batch_size=8, hidden_dim=4), regression_splits,
                    provider, max_epochs=1)


def test_train_fixed_restores_best_epoch(toy_provider, regression_splits):
    result = train_fixed("BLM", [LayerSpec(ENAS, ROW_1)], TrialSpec(batch_size=8, hidden_dim=4),
                         regression_splits, toy_provider, max_epochs=4, patience=2, evaluate_test=True)
    assert 1 <= result.best_epoch <= result.epochs_run <= 4
    assert result.dev.primary == max(h["dev"] for h in result.history)
    assert result.test is not None and result.train is None


def _overfit_splits():
    data = make_synthetic("classification", 32, seed=0)
    test = make_synthetic("classification", 16, seed=1)
    return DatasetSplits(data, data, test)


@pytest.mark.slow
@pytest.mark.parametrize("layers", [[LayerSpec(ENAS, ROW_1)], [LayerSpec(LSTM)]])
def test_blm_memorizes_small_training_set(layers):
    provider = ToyHashEmbedding(16, seed=0)
    trial = TrialSpec(batch_size=8, learning_rate=1e-2, hidden_dim=16, weight_decay=0.0)
    result = train_fixed("BLM", layers, trial, _overfit_splits(), provider,
                         max_epochs=200, patience=200, score_train=True, target=0.95)
    assert result.train.accuracy >= 0.95


def _smoke_search(seed: int):
    provider = ToyHashEmbedding(16, seed=0)
    full = make_synthetic("regression", 256, seed=0)
    train, dev = split(full, 0.25, seed=0)
    splits = DatasetSplits(train, dev, make_synthetic("regression", 32, seed=1))
    config = _search_config(max_epochs=10, patience=10, derive_count=10, seed=seed,
                            child=TrialSpec(batch_size=32, hidden_dim=16))
    spec = build_model_spec("BLM", [LayerSpec(ENAS)], config.child, provider, "regression")
    return run_search(config, splits, provider, spec)


@pytest.mark.slow
def test_search_smoke_on_synthetic_regression():
    state, derived = _smoke_search(seed=4)
    assert state.epoch == 10
    assert len(derived) == 10
    assert all(np.isfinite(h["train_loss"]) for h in state.history)
    assert all(-1.0 <= h["mean_reward"] <= 1.0 for h in state.history)


@pytest.mark.slow
def test_reward_average_does_not_fall_over_search():
    rising = 0
    for seed in range(10):
        state, _ = _smoke_search(seed)
        rising += state.history[-1]["baseline"] >= state.history[0]["baseline"]
    assert rising >= 7
