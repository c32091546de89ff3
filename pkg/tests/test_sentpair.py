import numpy as np
import pandas as pd
import pytest

from models.cell import ArchitectureError, parse
from models.sentpair import (
    ENAS,
    LSTM,
    RANDOM,
    EmbeddedBatch,
    LayerSpec,
    ModelSpec,
    SentencePairModel,
    attention_weights,
    cross_attention,
    joint_representation,
    layer_plan_kinds,
    load_model,
    make_batch,
    masked_max,
    masked_mean,
    predict,
    predict_and_score,
    save_model,
    write_predictions,
)
from models.tensor import constant, loss, no_grad
from utils.embeddings import ToyHashEmbedding
from utils.gradcheck import check_gradients

ROW_1 = parse("Tanh 0:Relu 0:Relu 0:Relu 0:Relu 0:Relu")
ROW_7 = parse("Tanh 0:Tanh 0:Relu 0:Tanh 3:Tanh 0:Tanh")


def _spec(kind, layers, task, input_dim=8, hidden=4, **extra):
    return ModelSpec(kind=kind, layers=tuple(layers), hidden_dims=(hidden,) * len(layers),
                     input_dim=input_dim, task=task, **extra)


def test_layer_spec_rules():
    assert LayerSpec(ENAS, ROW_1).is_cell
    assert not LayerSpec(LSTM).is_cell
    with pytest.raises(ArchitectureError):
        LayerSpec("GRU")
    with pytest.raises(ArchitectureError):
        LayerSpec(LSTM, ROW_1)


def test_model_spec_layer_count():
    with pytest.raises(ValueError):
        _spec("BLM", [LayerSpec(), LayerSpec()], "regression")
    with pytest.raises(ValueError):
        _spec("ESIM", [LayerSpec()], "regression")
    spec = _spec("ESIM", [LayerSpec(ENAS, ROW_1), LayerSpec(LSTM)], "classification")
    assert spec.plan == "E / L"
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert layer_plan_kinds("e / rnd") == ("E", "RND")


@pytest.mark.parametrize("kind, layers", [
    ("BLM", [LayerSpec(LSTM)]),
    ("BLM", [LayerSpec(ENAS, ROW_1)]),
    ("ESIM", [LayerSpec(ENAS, ROW_7), LayerSpec(LSTM)]),
    ("ESIM", [LayerSpec(LSTM), LayerSpec(RANDOM, ROW_1)]),
])
@pytest.mark.parametrize("task, width", [("classification", 2), ("regression", 1)])
def test_forward_shapes(kind, layers, task, width, toy_provider, regression_splits, rng):
    model = SentencePairModel(_spec(kind, layers, task), rng)
    batch = make_batch(toy_provider, regression_splits.train.examples[:5], "regression")
    assert model(batch).shape == (5, width)


def test_search_model_takes_architecture_per_call(toy_provider, regression_splits, rng):
    model = SentencePairModel(_spec("BLM", [LayerSpec(ENAS)], "regression"), rng)
    batch = make_batch(toy_provider, regression_splits.train.examples[:3], "regression")
    with pytest.raises(ArchitectureError):
        model(batch)
    first = model(batch, archs={0: ROW_1}).data
    second = model(batch, archs={0: ROW_7}).data
    assert not np.allclose(first, second)
    assert set(model.shared_cell_params()) <= set(model.parameters())


@pytest.mark.parametrize("kind, layers, task", [
    ("BLM", [LayerSpec(ENAS, ROW_7)], "regression"),
    ("BLM", [LayerSpec(LSTM)], "classification"),
    ("ESIM", [LayerSpec(ENAS, ROW_1), LayerSpec(LSTM)], "regression"),
])
def test_full_model_gradients(kind, layers, task, regression_splits, classification_splits):
    rng = np.random.default_rng(11)
    provider = ToyHashEmbedding(3, seed=1)
    splits = regression_splits if task == "regression" else classification_splits
    model = SentencePairModel(_spec(kind, layers, task, input_dim=3, hidden=3), rng)
    batch = make_batch(provider, splits.train.examples[:3], task)
    kind_of_loss = "mse" if task == "regression" else "cross_entropy"
    result = check_gradients(lambda: loss(kind_of_loss, model(batch), batch.labels),
                             model.parameters(), max_entries=4, rng=rng)
    assert result.ok, result


def test_regression_predictions_are_clamped(toy_provider, regression_splits, rng):
    spec = _spec("BLM", [LayerSpec(LSTM)], "regression", clamp_range=(0.0, 0.01))
    model = SentencePairModel(spec, rng)
    predicted = predict(model, toy_provider, regression_splits.dev.examples, batch_size=4)
    assert predicted.shape == (len(regression_splits.dev),)
    assert predicted.min() >= 0.0 and predicted.max() <= 0.01


def test_save_and_load_model(tmp_path, toy_provider, classification_splits, rng):
    model = SentencePairModel(_spec("ESIM", [LayerSpec(ENAS, ROW_7), LayerSpec(RANDOM, ROW_1)], "classification"), rng)
    save_model(tmp_path / "model", model, {"trial_id": 3})
    restored, meta = load_model(tmp_path / "model")
    assert meta["trial_id"] == 3
    assert restored.spec == model.spec
    examples = classification_splits.dev.examples
    before = predict_and_score(model, toy_provider, examples)
    after = predict_and_score(restored, toy_provider, examples)
    assert before == after


def test_write_predictions(tmp_path, regression_splits):
    examples = regression_splits.dev.examples[:4]
    path = write_predictions(tmp_path / "preds" / "dev.tsv", examples, np.arange(4.0))
    frame = pd.read_csv(path, sep="\t", dtype={"pair_id": str})
    assert list(frame.columns) == ["pair_id", "gold", "predicted"]
    assert list(frame["pair_id"]) == [ex.pair_id for ex in examples]
    np.testing.assert_allclose(frame["predicted"], np.arange(4.0))


def test_joint_representation_blocks():
    s1, s2 = constant([[1.0, 2.0]]), constant([[3.0, 4.0]])
    np.testing.assert_array_equal(joint_representation(s1, s2).data, [[1, 2, 3, 4, 2, 2, 3, 8]])
    swapped = joint_representation(s2, s1).data
    np.testing.assert_array_equal(swapped[:, 4:], joint_representation(s1, s2).data[:, 4:])
    np.testing.assert_array_equal(joint_representation(s1, s1).data[:, 4:6], [[0.0, 0.0]])


def test_attention_rows_are_distributions_over_unmasked_positions(rng):
    a = constant(rng.normal(size=(2, 4, 3)))
    b = constant(rng.normal(size=(2, 5, 3)))
    mask_a = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=float)
    mask_b = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 0]], dtype=float)
    over_b, over_a = attention_weights(a, b, mask_a, mask_b)
    np.testing.assert_allclose(over_b.data.sum(axis=2), np.ones((2, 4)), atol=1e-12)
    np.testing.assert_allclose(over_a.data.sum(axis=1), np.ones((2, 5)), atol=1e-12)
    assert np.all(over_b.data[0, :, 2:] == 0.0) and np.all(over_b.data[1, :, 4] == 0.0)
    assert np.all(over_a.data[0, 3, :] == 0.0)


def test_single_unmasked_token_takes_all_attention(rng):
    a = constant(rng.normal(size=(1, 3, 4)))
    b = constant(rng.normal(size=(1, 3, 4)))
    single = np.array([[1.0, 0.0, 0.0]])
    a_tilde, b_tilde = cross_attention(a, b, single, single)
    for i in range(3):
        np.testing.assert_allclose(a_tilde.data[0, i], b.data[0, 0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(b_tilde.data[0, i], a.data[0, 0], rtol=0, atol=1e-15)


def test_masked_pooling_ignores_padding():
    states = constant([[[1.0, 5.0], [3.0, -1.0], [100.0, 100.0]]])
    mask = np.array([[1.0, 1.0, 0.0]])
    np.testing.assert_array_equal(masked_max(states, mask).data, [[3.0, 5.0]])
    np.testing.assert_array_equal(masked_mean(states, mask).data, [[2.0, 2.0]])


def _with_padding(batch: EmbeddedBatch, extra_a: int, extra_b: int) -> EmbeddedBatch:
    def pad(values, mask, extra):
        n, steps, dim = values.shape
        return (constant(np.concatenate([values.data, np.zeros((n, extra, dim))], axis=1)),
                np.concatenate([mask, np.zeros((n, extra))], axis=1))

    a, mask_a = pad(batch.a, batch.mask_a, extra_a)
    b, mask_b = pad(batch.b, batch.mask_b, extra_b)
    return EmbeddedBatch(a, mask_a, b, mask_b, batch.labels)


@pytest.mark.parametrize("kind, layers", [
    ("BLM", [LayerSpec(LSTM)]),
    ("BLM", [LayerSpec(ENAS, ROW_7)]),
    ("ESIM", [LayerSpec(ENAS, ROW_1), LayerSpec(LSTM)]),
    ("ESIM", [LayerSpec(LSTM), LayerSpec(RANDOM, ROW_7)]),
])
def test_pad_tokens_do_not_change_outputs(kind, layers, toy_provider, regression_splits, rng):
    model = SentencePairModel(_spec(kind, layers, "regression"), rng)
    batch = make_batch(toy_provider, regression_splits.train.examples[:4], "regression")
    with no_grad():
        plain = model(batch).data
        padded = model(_with_padding(batch, 3, 5)).data
    np.testing.assert_allclose(padded, plain, rtol=0, atol=1e-9)
