"""Fast gradient sign perturbations of RSSI features."""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import Any

import numpy as np

from beam_align.configuration import AttackConfig, AttackSpace, FeatureScale
from beam_align.model import ModelState, Preprocessing, backward_batch, preprocess, preprocess_jacobian
from beam_align.sweep import Dataset, Split
from beam_align.utils import to_builtin

logger = logging.getLogger(__name__)


def _restore(inputs: np.ndarray, prep: Preprocessing) -> np.ndarray:
    """Map model inputs back to linear RSSI in watts."""
    values = inputs * prep.std + prep.mean
    if prep.scale == FeatureScale.DB:
        return 10.0 ** ((values - 30.0) / 10.0)
    return values


def epsilon_from_relative_power(rssi: np.ndarray, fraction: float) -> float:
    """Absolute epsilon equal to ``fraction`` of the mean per-sample RMS feature."""
    rssi = np.atleast_2d(np.asarray(rssi, dtype=np.float64))
    if rssi.shape[0] == 0:
        return 0.0
    return float(fraction * np.mean(np.sqrt(np.mean(rssi**2, axis=1))))


def fgsm_batch(rssi: np.ndarray, labels: np.ndarray, state: ModelState, cfg: AttackConfig) -> np.ndarray:
    """Perturb each row of linear RSSI by ``cfg.epsilon`` along the sign of its loss gradient.

    In linear space the step is taken on the watt features through the
    preprocessing Jacobian; in model space it is taken on the standardized
    model inputs and mapped back. An optional relative power budget scales
    each perturbation down, and the nonnegative clamp is applied last.
    """
    rssi = np.atleast_2d(np.asarray(rssi, dtype=np.float64))
    if cfg.epsilon == 0 or rssi.shape[0] == 0:
        return rssi.copy()
    inputs = preprocess(rssi, state.preprocessing)
    _, _, input_grad = backward_batch(inputs, labels, state)

    if cfg.space == AttackSpace.LINEAR:
        base = rssi
        grad = input_grad * preprocess_jacobian(rssi, state.preprocessing)
    else:
        base = inputs
        grad = input_grad
    delta = cfg.epsilon * np.sign(grad)

    if cfg.relative_power_budget is not None:
        limit = cfg.relative_power_budget * np.linalg.norm(base, axis=1, keepdims=True)
        norm = np.linalg.norm(delta, axis=1, keepdims=True)
        delta = delta * np.minimum(1.0, np.divide(limit, norm, out=np.ones_like(norm), where=norm > 0))

    adversarial = base + delta
    if cfg.space == AttackSpace.MODEL:
        adversarial = _restore(adversarial, state.preprocessing)
    if cfg.clamp:
        adversarial = np.maximum(adversarial, 0.0)
    return adversarial


def fgsm(x: np.ndarray, true_label: int, state: ModelState, cfg: AttackConfig) -> np.ndarray:
    """Adversarial version of one linear RSSI vector."""
    return fgsm_batch(np.asarray(x)[None, :], np.array([true_label]), state, cfg)[0]


def resolve_epsilon(split: Split, state: ModelState, cfg: AttackConfig) -> float:
    """Absolute epsilon for ``split``: relative knob when set, else the configured value."""
    if cfg.relative_epsilon is None:
        return cfg.epsilon
    if cfg.space == AttackSpace.LINEAR:
        features = split.rssi
    else:
        features = preprocess(split.rssi, state.preprocessing)
    return epsilon_from_relative_power(features, cfg.relative_epsilon)


def attack_split(split: Split, state: ModelState, cfg: AttackConfig) -> tuple[Split, float]:
    """Perturb every sample of ``split``; returns the adversarial split and the epsilon used."""
    epsilon = resolve_epsilon(split, state, cfg)
    cfg = replace(cfg, epsilon=epsilon)
    logger.info(
        "FGSM on %d samples: space=%s epsilon=%.6g relative=%s budget=%s clamp=%s",
        len(split),
        cfg.space.value,
        epsilon,
        cfg.relative_epsilon,
        cfg.relative_power_budget,
        cfg.clamp,
    )
    adversarial = fgsm_batch(split.rssi, split.labels, state, cfg)
    if not np.all(np.isfinite(adversarial)):
        logger.warning("FGSM produced non-finite features; check the attack configuration")
    return split.with_features(adversarial.astype(np.float32)), epsilon


def adversarial_dataset(source: Dataset, split_name: str, adversarial: Split, cfg: AttackConfig, epsilon: float) -> Dataset:
    """Wrap an adversarial split in a dataset flagged as adversarial."""
    empty = Split.empty(source.m_w)
    splits: dict[str, Split] = {name: empty for name in ("train", "validation", "calibration", "test")}
    splits[split_name] = adversarial
    attack: dict[str, Any] = {
        "epsilon": epsilon,
        "relative_epsilon": cfg.relative_epsilon,
        "relative_power_budget": cfg.relative_power_budget,
        "clamp_nonnegative": cfg.clamp,
        "space": cfg.space.value,
        "source_split": split_name,
    }
    meta = {**source.meta, "adversarial": True, "attack": to_builtin(attack)}
    return Dataset(**splits, meta=meta)


def relative_perturbation(clean: np.ndarray, adversarial: np.ndarray) -> float:
    """Mean ||delta||_2 / ||x||_2 over samples."""
    clean = np.atleast_2d(clean).astype(np.float64)
    norms = np.linalg.norm(clean, axis=1)
    deltas = np.linalg.norm(np.atleast_2d(adversarial) - clean, axis=1)
    valid = norms > 0
    return float(np.mean(deltas[valid] / norms[valid])) if np.any(valid) else math.nan
