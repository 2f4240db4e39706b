from pathlib import Path
from typing import Any

import numpy as np
import pytest

from beam_align.configuration import DknnConfig, ModelConfig, RunConfig, TrainingConfig
from beam_align.dknn import build_index, calibrate
from beam_align.model import train
from beam_align.sweep import Dataset, Split, build_dataset
from beam_align.utils import dbm_to_watt

MINI_LAYERS = [
    {"kind": "conv", "filters": 4, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "conv", "filters": 8, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "conv", "filters": 8, "kernel": 1, "stride": 1, "padding": 0},
    {"kind": "dense", "filters": 16},
]

WIDE_SECTIONS: dict[str, Any] = {
    "scenario": {"n_ue": 2000},
    "sweep": {"fractions": {"train": 0.55, "validation": 0.05, "calibration": 0.15, "test": 0.25}},
    "dknn": {"k": 10},
}


def mini_config_dict(workspace: Path, **sections: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "seed": 11,
        "scenario": {"n_bs": 8, "n_paths": 3, "n_ue": 240},
        "sweep": {"oversampling": 1},
        "noise": {"mode": "fixed", "noise_power_dbm": -90.0},
        "model": {"layers": MINI_LAYERS},
        "training": {"epochs": 8, "batch_size": 32, "learning_rate": 0.01},
        "dknn": {"k": 4},
        "attack": {"relative_epsilon": 0.1, "sweep_relative_epsilons": [0.05]},
        "eval": {"k_list": [1, 3], "noise_levels_dbm": [-90.0, -50.0], "refine_k": 3, "n_bins": 5},
        "paths": {"workspace": str(workspace)},
    }
    for name, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(name), dict):
            data[name] = {**data[name], **value}
        else:
            data[name] = value
    return data


def blob_dataset(n_classes: int = 4, m_w: int = 8, per_class: int = 100, seed: int = 0) -> Dataset:
    """Tight Gaussian clusters in dBm around random centers, stored as linear watts."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-90.0, -50.0, (n_classes, m_w))
    labels = np.repeat(np.arange(n_classes), per_class)
    rssi = dbm_to_watt(centers[labels] + rng.normal(0.0, 0.5, (labels.size, m_w)))
    order = rng.permutation(labels.size)
    n = labels.size
    parts = np.split(order, [int(0.6 * n), int(0.7 * n), int(0.8 * n)])
    splits = [Split(rssi[part], labels[part], np.zeros(part.size), part) for part in parts]
    return Dataset(*splits, meta={"m_w": m_w, "q": n_classes, "config_hash": None})


@pytest.fixture(scope="session")
def mini_config(tmp_path_factory) -> RunConfig:
    return RunConfig.from_dict(mini_config_dict(tmp_path_factory.mktemp("workspace")))


@pytest.fixture(scope="session")
def mini_dataset(mini_config):
    return build_dataset(mini_config)


@pytest.fixture(scope="session")
def mini_state(mini_config, mini_dataset):
    return train(
        mini_dataset,
        mini_config.model,
        mini_config.training,
        feature_scale=mini_config.sweep.feature_scale,
        seed=mini_config.training_seed,
    )


@pytest.fixture(scope="session")
def mini_index(mini_config, mini_dataset, mini_state):
    return build_index(mini_state, mini_dataset.train, mini_config.dknn, seed=mini_config.seed)


@pytest.fixture(scope="session")
def mini_calibration(mini_index, mini_state, mini_dataset):
    return calibrate(mini_index, mini_state, mini_dataset.calibration)


@pytest.fixture(scope="session")
def wide_run(tmp_path_factory):
    """Mini network on a larger scenario: over a thousand stored points, k=10."""
    config = RunConfig.from_dict(mini_config_dict(tmp_path_factory.mktemp("wide"), **WIDE_SECTIONS))
    dataset = build_dataset(config)
    state = train(dataset, config.model, config.training, feature_scale=config.sweep.feature_scale, seed=config.training_seed)
    index = build_index(state, dataset.train, config.dknn, seed=config.seed)
    return config, dataset, state, index, calibrate(index, state, dataset.calibration)


@pytest.fixture(scope="session")
def blobs():
    """Separable clusters with a trained model, an exact index and calibration scores."""
    dataset = blob_dataset()
    training = TrainingConfig(epochs=80, batch_size=16, learning_rate=0.01)
    state = train(dataset, ModelConfig.from_dict({"layers": MINI_LAYERS}), training, seed=0)
    index = build_index(state, dataset.train, DknnConfig(k=5))
    return dataset, state, index, calibrate(index, state, dataset.calibration)
