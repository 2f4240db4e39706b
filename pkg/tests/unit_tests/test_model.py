import math

import numpy as np
import pytest

from beam_align.configuration import (
    ConvDimensionality,
    FeatureScale,
    LayerKind,
    ModelConfig,
    Optimizer,
    TrainingConfig,
)
from beam_align.errors import ChecksumError, ConfigError, InvalidArgumentError, TrainingDivergenceError
from beam_align.model import (
    ModelState,
    accuracy,
    backward,
    fit_preprocessing,
    forward,
    infer,
    init_model,
    load_checkpoint,
    parameter_count,
    plan_layers,
    predict_topk,
    preprocess,
    preprocess_jacobian,
    rank_beams,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
    train,
)
from beam_align.sweep import Dataset
from tests.conftest import MINI_LAYERS


def _mini_model(**overrides) -> ModelConfig:
    data = {"input_len": 8, "n_classes": 8, "layers": MINI_LAYERS, **overrides}
    return ModelConfig.from_dict(data)


def _with_bias(state: ModelState, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    params = state.params.copy()
    for plan in state.plans:
        end = plan.offset + plan.n_weights
        params[end: end + plan.weight_shape[0]] = rng.uniform(-0.1, 0.1, plan.weight_shape[0])
    return ModelState(config=state.config, params=params, preprocessing=state.preprocessing)


def _loss(params: np.ndarray, x: np.ndarray, label: int, state: ModelState) -> float:
    perturbed = ModelState(config=state.config, params=params, preprocessing=state.preprocessing)
    return softmax_cross_entropy(forward(x, perturbed)[0], label)


def _check_gradients(state: ModelState, seed: int) -> None:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(state.input_len)
    label = int(rng.integers(state.n_classes))
    grad, input_grad = backward(x, label, state)
    step = 1e-5

    numeric = np.empty_like(state.params)
    for i in range(state.params.shape[0]):
        up, down = state.params.copy(), state.params.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (_loss(up, x, label, state) - _loss(down, x, label, state)) / (2 * step)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)

    numeric_input = []
    for i in range(state.input_len):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        numeric_input.append(
            (softmax_cross_entropy(forward(up, state)[0], label) - softmax_cross_entropy(forward(down, state)[0], label))
            / (2 * step)
        )
    np.testing.assert_allclose(input_grad, numeric_input, rtol=1e-4, atol=1e-8)


def test_plan_shapes_and_parameter_count() -> None:
    config = _mini_model()
    plans = plan_layers(config)
    assert [p.out_shape for p in plans] == [(4, 1, 8), (8, 1, 8), (8, 1, 8), (16,), (8,)]
    assert plans[-1].kind == LayerKind.DENSE
    assert parameter_count(config) == 16 + 104 + 72 + 1040 + 136


def test_unresolved_or_oversized_architectures() -> None:
    with pytest.raises(ConfigError):
        plan_layers(ModelConfig.from_dict({"layers": MINI_LAYERS}))
    too_wide = _mini_model(layers=[{"kind": "conv", "filters": 2, "kernel": 9, "padding": 0}])
    with pytest.raises(ConfigError):
        plan_layers(too_wide)


def test_forward_exposes_every_hidden_layer() -> None:
    state = init_model(_mini_model(), seed=0)
    logits, acts = forward(np.linspace(-1, 1, 8), state)
    assert logits.shape == (8,)
    assert [a.shape for a in acts.layers] == [(32,), (64,), (64,), (16,)]
    assert all(np.all(a >= 0) for a in acts.layers)
    with pytest.raises(InvalidArgumentError):
        forward(np.zeros(7), state)


def test_init_is_seeded() -> None:
    first = init_model(_mini_model(), seed=3)
    second = init_model(_mini_model(), seed=3)
    np.testing.assert_array_equal(first.params, second.params)
    assert not np.array_equal(first.params, init_model(_mini_model(), seed=4).params)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backpropagation_matches_finite_differences(seed) -> None:
    state = _with_bias(init_model(_mini_model(), seed=seed), seed)
    _check_gradients(state, seed)


def test_backpropagation_two_dimensional_and_strided() -> None:
    config = _mini_model(
        conv_dimensionality="2d",
        reshape=[2, 4],
        layers=[
            {"kind": "conv", "filters": 3, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "conv", "filters": 4, "kernel": 2, "stride": 2, "padding": 0},
            {"kind": "dense", "filters": 6},
        ],
    )
    assert config.conv_dimensionality == ConvDimensionality.TWO_D
    state = _with_bias(init_model(config, seed=5), 5)
    assert [p.out_shape for p in state.plans][:2] == [(3, 2, 4), (4, 1, 2)]
    _check_gradients(state, 5)


def test_backpropagation_dense_only() -> None:
    config = _mini_model(layers=[{"kind": "dense", "filters": 10}, {"kind": "dense", "filters": 6}])
    _check_gradients(_with_bias(init_model(config, seed=6), 6), 6)


def test_cross_entropy_and_softmax() -> None:
    logits = np.array([1.0, 2.0, 0.5])
    probs = softmax(logits)
    assert probs.sum() == pytest.approx(1.0)
    assert softmax_cross_entropy(logits, 1) == pytest.approx(-math.log(probs[1]))
    assert softmax_cross_entropy(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        softmax_cross_entropy(logits, 3)


def test_rank_beams_breaks_ties_toward_lower_index() -> None:
    np.testing.assert_array_equal(rank_beams(np.array([1.0, 3.0, 3.0, 0.0]), 3), [[1, 2, 0]])
    with pytest.raises(InvalidArgumentError):
        rank_beams(np.zeros(4), 5)
    state = init_model(_mini_model(), seed=0)
    top = predict_topk(np.ones(8), state, 3)
    assert len(top) == 3 and len(set(top)) == 3


def test_preprocessing_and_jacobian() -> None:
    rssi = np.array([[1e-10, 2e-10, 4e-11], [3e-12, 1e-9, 5e-10]])
    prep = fit_preprocessing(rssi, FeatureScale.DB)
    inputs = preprocess(rssi, prep)
    assert inputs.mean() == pytest.approx(0.0, abs=1e-9)
    assert inputs.std() == pytest.approx(1.0)
    step = rssi * 1e-6
    numeric = (preprocess(rssi + step, prep) - preprocess(rssi - step, prep)) / (2 * step)
    np.testing.assert_allclose(preprocess_jacobian(rssi, prep), numeric, rtol=1e-6)

    linear = fit_preprocessing(rssi, FeatureScale.LINEAR)
    np.testing.assert_allclose(preprocess_jacobian(rssi, linear), 1.0 / linear.std)
    zero = fit_preprocessing(np.zeros((2, 3)), FeatureScale.DB)
    assert np.all(np.isfinite(preprocess(np.zeros((2, 3)), zero)))


def test_training_reduces_loss_and_is_deterministic(mini_config, mini_dataset, mini_state) -> None:
    meta = mini_state.training_meta
    assert meta["epochs_run"] == mini_config.training.epochs
    assert len(meta["train_loss"]) == len(meta["val_loss"]) == mini_config.training.epochs
    assert meta["train_loss"][-1] < meta["train_loss"][0]
    again = train(
        mini_dataset,
        mini_config.model,
        mini_config.training,
        feature_scale=mini_config.sweep.feature_scale,
        seed=mini_config.training_seed,
    )
    np.testing.assert_array_equal(again.params, mini_state.params)
    assert meta["config_hash"] == mini_dataset.meta["config_hash"]


def test_full_batch_gradient_descent_is_monotone(mini_dataset) -> None:
    training = TrainingConfig(optimizer=Optimizer.GD, batch_size=0, learning_rate=0.01, epochs=15)
    state = train(mini_dataset, ModelConfig.from_dict({"layers": [MINI_LAYERS[0], {"kind": "dense", "filters": 16}]}), training)
    losses = state.training_meta["train_loss"]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_early_stopping_records_best_epoch(mini_dataset) -> None:
    training = TrainingConfig(epochs=12, batch_size=16, learning_rate=0.05, patience=2)
    state = train(mini_dataset, ModelConfig.from_dict({"layers": MINI_LAYERS}), training, seed=1)
    meta = state.training_meta
    assert meta["best_epoch"] is not None
    assert meta["val_loss"][meta["best_epoch"]] == min(meta["val_loss"])
    assert meta["epochs_run"] <= 12


def test_divergence_is_reported(mini_dataset) -> None:
    broken = mini_dataset.train.with_features(np.full_like(mini_dataset.train.rssi, np.nan))
    dataset = Dataset(broken, mini_dataset.validation, mini_dataset.calibration, mini_dataset.test, mini_dataset.meta)
    with pytest.raises(TrainingDivergenceError) as info:
        train(dataset, ModelConfig.from_dict({"layers": MINI_LAYERS}), TrainingConfig(epochs=2))
    assert info.value.epoch == 0


def test_checkpoint_reproduces_the_model(tmp_path, mini_dataset, mini_state) -> None:
    path = save_checkpoint(mini_state, tmp_path / "model.bam")
    restored = load_checkpoint(path)
    assert restored.config == mini_state.config
    assert restored.preprocessing == mini_state.preprocessing
    assert restored.training_meta == mini_state.training_meta
    logits, _ = infer(mini_dataset.test.rssi, mini_state)
    restored_logits, _ = infer(mini_dataset.test.rssi, restored)
    np.testing.assert_array_equal(restored_logits, logits)

    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_separable_clusters_are_learned(blobs) -> None:
    dataset, state, _, _ = blobs
    assert accuracy(dataset.train.rssi, dataset.train.labels, state) >= 0.99
    assert accuracy(dataset.test.rssi, dataset.test.labels, state) >= 0.99
