"""Full-size checks on the shipped default configuration, repeated over a few seeds."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from beam_align.channel import synthesize_channel_set
from beam_align.configuration import NoiseMode, RunConfig
from beam_align.dknn import build_index, calibrate, dknn_predict_batch, load_calibration, load_index
from beam_align.evaluation import evaluate_all
from beam_align.model import load_checkpoint, train
from beam_align.pipeline import run_attack, run_calibrate, run_eval, run_generate, run_train
from beam_align.sweep import build_dataset, read_dataset

pytestmark = pytest.mark.slow

DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "default.json"
SEEDS = (0, 1, 2)


def _default_config(seed: int, workspace: Path) -> RunConfig:
    data = json.loads(DEFAULT_CONFIG.read_text(encoding="utf-8"))
    data["seed"] = seed
    data["paths"] = {"workspace": str(workspace)}
    return RunConfig.from_dict(data)


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory) -> dict[int, tuple[RunConfig, dict]]:
    runs = {}
    for seed in SEEDS:
        config = _default_config(seed, tmp_path_factory.mktemp(f"seed{seed}"))
        run_generate(config)
        run_train(config)
        run_calibrate(config)
        run_attack(config)
        summary = run_eval(config)
        runs[seed] = (config, json.loads(Path(summary["report"]).read_text(encoding="utf-8")))
    return runs


def _worst_level(report: dict) -> dict:
    return max(report["noise_sweep"], key=lambda level: level["noise_power_dbm"])


def test_adversarial_inputs_lose_credibility(default_runs) -> None:
    ratios = []
    clean, attacked = [], []
    for _, report in default_runs.values():
        row = next(row for row in report["robustness"] if row["threshold"] == pytest.approx(0.2))
        if row["ratio"] is None:
            ratios.append(math.inf if row["dknn_fraction"] > 0 else 0.0)
        else:
            ratios.append(row["ratio"])
        clean.append(report["test_split"]["dknn"]["mean_credibility"])
        attacked.append(report["adversarial"]["dknn"]["mean_credibility"])
    assert np.median(ratios) >= 2.0
    assert np.median(attacked) < np.median(clean)


def test_noise_trained_model_holds_up_at_low_snr(default_runs) -> None:
    gaps = []
    for config, report in default_runs.values():
        quiet = replace(config, noise=replace(config.noise, mode=NoiseMode.NONE))
        channels = synthesize_channel_set(quiet.scenario, quiet.scenario_seed)
        dataset = build_dataset(quiet, channels)
        state = train(
            dataset, quiet.model, quiet.training, feature_scale=quiet.sweep.feature_scale, seed=quiet.training_seed
        )
        index = build_index(state, dataset.train, quiet.dknn, seed=quiet.seed)
        scores = calibrate(index, state, dataset.calibration)
        quiet_report = evaluate_all(state, index, scores, dataset, channels, quiet)
        noisy = _worst_level(report)["methods"]["softmax"]["topk_accuracy"]["3"]
        clean = _worst_level(quiet_report.to_dict())["methods"]["softmax"]["topk_accuracy"]["3"]
        gaps.append(noisy - clean)
    assert np.median(gaps) >= 0.05


def test_refined_sweeps_recover_most_of_the_exhaustive_rate(default_runs) -> None:
    refined = {"dknn_refined": [], "softmax_refined": []}
    for _, report in default_runs.values():
        odft = report["methods"]["odft"]["mean_se"]
        for method, ratios in refined.items():
            ratios.append(report["methods"][method]["mean_se"] / odft)
        violations = report["se_ordering_violations"]
        assert violations["odft_vs_dft"] == 0
        assert violations["odft_vs_softmax_top1"] == 0
        assert violations["odft_vs_dknn_top1"] == 0
    for ratios in refined.values():
        assert np.median(ratios) >= 0.95


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
def test_true_label_p_values_are_conservative_at_full_size(default_runs, alpha) -> None:
    config, _ = default_runs[0]
    dataset = read_dataset(config.paths.resolve("dataset"))
    state = load_checkpoint(config.paths.resolve("checkpoint"))
    index = load_index(config.paths.resolve("index"))
    calibration = load_calibration(config.paths.resolve("calibration"))
    test = dataset.test
    batch = dknn_predict_batch(test.rssi, index, calibration, state)
    p_true = batch.p_values[np.arange(len(test)), test.labels]
    assert np.mean(p_true <= alpha) <= alpha + 2 / math.sqrt(len(test))
