import numpy as np
import pytest

from beam_align.attack import (
    adversarial_dataset,
    attack_split,
    epsilon_from_relative_power,
    fgsm,
    fgsm_batch,
    relative_perturbation,
    resolve_epsilon,
)
from beam_align.configuration import AttackConfig, AttackSpace
from beam_align.model import backward_batch, batch_cross_entropy, infer, preprocess, preprocess_jacobian


def _rows(mini_dataset, n: int = 12):
    return mini_dataset.test.rssi[:n].astype(np.float64), mini_dataset.test.labels[:n]


def _input_gradient(rssi, labels, state):
    _, _, grad = backward_batch(preprocess(rssi, state.preprocessing), labels, state)
    return grad


def test_zero_epsilon_leaves_features_untouched(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset)
    adversarial = fgsm_batch(rssi, labels, mini_state, AttackConfig(epsilon=0.0, relative_epsilon=None))
    np.testing.assert_array_equal(adversarial, rssi)


def test_linear_space_step_follows_the_gradient_sign(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset)
    epsilon = epsilon_from_relative_power(rssi, 0.05)
    cfg = AttackConfig(epsilon=epsilon, relative_epsilon=None, clamp_nonnegative=False)
    grad = _input_gradient(rssi, labels, mini_state) * preprocess_jacobian(rssi, mini_state.preprocessing)
    expected = rssi + epsilon * np.sign(grad)
    np.testing.assert_allclose(fgsm_batch(rssi, labels, mini_state, cfg), expected, rtol=1e-12)

    clamped = fgsm_batch(rssi, labels, mini_state, AttackConfig(epsilon=epsilon, relative_epsilon=None))
    np.testing.assert_allclose(clamped, np.maximum(expected, 0.0), rtol=1e-12)
    assert np.all(clamped >= 0)


def test_model_space_step_is_taken_on_model_inputs(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset)
    cfg = AttackConfig(epsilon=0.1, relative_epsilon=None, space=AttackSpace.MODEL)
    assert cfg.clamp is False
    adversarial = fgsm_batch(rssi, labels, mini_state, cfg)
    expected = preprocess(rssi, mini_state.preprocessing) + 0.1 * np.sign(_input_gradient(rssi, labels, mini_state))
    np.testing.assert_allclose(preprocess(adversarial, mini_state.preprocessing), expected, atol=1e-9)


def test_power_budget_caps_the_perturbation(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset)
    epsilon = epsilon_from_relative_power(rssi, 1.0)
    cfg = AttackConfig(epsilon=epsilon, relative_epsilon=None, relative_power_budget=0.01, clamp_nonnegative=False)
    adversarial = fgsm_batch(rssi, labels, mini_state, cfg)
    ratios = np.linalg.norm(adversarial - rssi, axis=1) / np.linalg.norm(rssi, axis=1)
    assert np.all(ratios <= 0.01 + 1e-9)
    assert relative_perturbation(rssi, adversarial) == pytest.approx(float(np.mean(ratios)))


def test_fgsm_increases_the_loss(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset, 30)
    cfg = AttackConfig(epsilon=0.05, relative_epsilon=None, space=AttackSpace.MODEL)
    clean_logits, _ = infer(rssi, mini_state)
    adv_logits, _ = infer(fgsm_batch(rssi, labels, mini_state, cfg), mini_state)
    assert batch_cross_entropy(adv_logits, labels) > batch_cross_entropy(clean_logits, labels)


def test_single_sample_matches_batch(mini_dataset, mini_state) -> None:
    rssi, labels = _rows(mini_dataset, 3)
    cfg = AttackConfig(epsilon=epsilon_from_relative_power(rssi, 0.1), relative_epsilon=None)
    batch = fgsm_batch(rssi, labels, mini_state, cfg)
    np.testing.assert_allclose(fgsm(rssi[1], int(labels[1]), mini_state, cfg), batch[1])


def test_epsilon_from_relative_power() -> None:
    assert epsilon_from_relative_power(np.array([[3.0, 4.0]]), 0.1) == pytest.approx(0.35355339)
    assert epsilon_from_relative_power(np.zeros((0, 4)), 0.1) == 0.0


def test_resolve_epsilon(mini_dataset, mini_state) -> None:
    split = mini_dataset.test
    assert resolve_epsilon(split, mini_state, AttackConfig(epsilon=0.3, relative_epsilon=None)) == 0.3
    linear = resolve_epsilon(split, mini_state, AttackConfig(relative_epsilon=0.1))
    assert linear == pytest.approx(epsilon_from_relative_power(split.rssi, 0.1))
    model = resolve_epsilon(split, mini_state, AttackConfig(relative_epsilon=0.1, space=AttackSpace.MODEL))
    assert model == pytest.approx(epsilon_from_relative_power(preprocess(split.rssi, mini_state.preprocessing), 0.1))


def test_attack_split_and_adversarial_dataset(mini_dataset, mini_state) -> None:
    cfg = AttackConfig(relative_epsilon=0.1)
    adversarial, epsilon = attack_split(mini_dataset.test, mini_state, cfg)
    assert epsilon > 0
    assert adversarial.rssi.dtype == np.float32
    np.testing.assert_array_equal(adversarial.labels, mini_dataset.test.labels)
    np.testing.assert_array_equal(adversarial.ue_ids, mini_dataset.test.ue_ids)

    dataset = adversarial_dataset(mini_dataset, "test", adversarial, cfg, epsilon)
    assert dataset.meta["adversarial"] is True
    assert dataset.meta["attack"]["epsilon"] == pytest.approx(epsilon)
    assert dataset.meta["attack"]["space"] == "linear"
    assert dataset.meta["config_hash"] == mini_dataset.meta["config_hash"]
    assert mini_dataset.meta["adversarial"] is False
    assert len(dataset.train) == 0 and len(dataset.test) == len(mini_dataset.test)


def test_relative_perturbation_skips_zero_rows() -> None:
    clean = np.array([[3.0, 4.0], [0.0, 0.0]])
    adversarial = np.array([[3.0, 4.5], [1.0, 0.0]])
    assert relative_perturbation(clean, adversarial) == pytest.approx(0.1)
