import math

import numpy as np
import pytest

from beam_align.channel import synthesize_channel_set
from beam_align.codebook import odft_codebook, sensing_codebook
from beam_align.configuration import NoiseMode, NoiseModel, RunConfig, SplitFractions
from beam_align.errors import ChecksumError, InvalidArgumentError, SplitOverlapError
from beam_align.sweep import (
    SPLITS,
    Split,
    beamform_gain,
    build_dataset,
    check_disjoint,
    gains_matrix,
    measure_rssi,
    optimal_beam,
    read_dataset,
    resolve_noise,
    snr,
    split_sizes,
    sweep_beams,
    verify_labels,
    write_dataset,
)
from beam_align.utils import dbm_to_watt, substream
from tests.conftest import mini_config_dict


def _channel(seed: int = 0, n: int = 8) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def test_beamform_gain_matches_scalar_loop() -> None:
    h = _channel(1)
    w = odft_codebook(8, 2)[5]
    total = sum(h[n].conjugate() * w[n] for n in range(8))
    assert beamform_gain(h, w) == pytest.approx(abs(total) ** 2)
    with pytest.raises(InvalidArgumentError):
        beamform_gain(h, w[:4])


def test_snr_and_noise_power_guard() -> None:
    h, w = _channel(2), odft_codebook(8, 1)[0]
    assert snr(h, w, 2.0, 0.5) == pytest.approx(4.0 * beamform_gain(h, w))
    with pytest.raises(InvalidArgumentError):
        snr(h, w, 1.0, 0.0)


def test_optimal_beam_is_exhaustive_argmax() -> None:
    narrow = odft_codebook(8, 4)
    for seed in range(5):
        h = _channel(seed)
        gains = [beamform_gain(h, narrow[q]) for q in range(len(narrow))]
        assert optimal_beam(h, narrow) == int(np.argmax(gains))
        np.testing.assert_allclose(gains_matrix(h, narrow)[0], gains)


def test_noiseless_sweep_is_received_power() -> None:
    h = _channel(3)
    sensing = sensing_codebook(8, 8)
    rssi = sweep_beams(h, sensing, 1e-10, 0.0, substream(0, "noise", 0))
    expected = [1e-10 * beamform_gain(h, sensing[i]) for i in range(8)]
    np.testing.assert_allclose(rssi, expected, rtol=1e-12)
    none = measure_rssi(h, sensing, 1e-10, NoiseModel(mode=NoiseMode.NONE), substream(0, "noise", 0))
    np.testing.assert_allclose(none, expected, rtol=1e-12)


def test_noisy_sweep_is_seeded() -> None:
    h = _channel(4)
    sensing = sensing_codebook(8, 8)
    noise = NoiseModel(mode=NoiseMode.FIXED, noise_power_dbm=-60.0)
    first = measure_rssi(h, sensing, 1e-10, noise, substream(0, "noise", 3))
    second = measure_rssi(h, sensing, 1e-10, noise, substream(0, "noise", 3))
    np.testing.assert_array_equal(first, second)
    assert np.all(first >= 0)


def test_resolve_noise_draws_one_level_in_range() -> None:
    noise = NoiseModel(mode=NoiseMode.RANGED, noise_power_range_dbm=(-80.0, -40.0), per_sample_draw=False)
    resolved = resolve_noise(noise, 5)
    assert resolved.mode == NoiseMode.FIXED
    assert -80.0 <= resolved.noise_power_dbm <= -40.0
    per_sample = NoiseModel(mode=NoiseMode.RANGED)
    assert resolve_noise(per_sample, 5) is per_sample


def test_split_sizes() -> None:
    assert split_sizes(100, SplitFractions()) == {"train": 70, "validation": 10, "calibration": 5, "test": 15}
    sizes = split_sizes(7, SplitFractions())
    assert sum(sizes.values()) == 7
    assert all(v >= 0 for v in sizes.values())


def test_dataset_splits_are_disjoint_and_labeled(mini_config, mini_dataset) -> None:
    ids = np.concatenate([mini_dataset.split(name).ue_ids for name in SPLITS])
    np.testing.assert_array_equal(np.sort(ids), np.arange(mini_config.scenario.n_ue))
    H = synthesize_channel_set(mini_config.scenario, mini_config.scenario_seed)
    narrow = odft_codebook(mini_config.scenario.n_bs, mini_config.sweep.oversampling)
    for sample in (mini_dataset.test.sample(i) for i in range(20)):
        assert sample.label == optimal_beam(H[sample.ue_id], narrow)
        assert sample.rssi.shape == (mini_config.m_w,)
    assert verify_labels(mini_dataset, H, narrow) == 0
    assert mini_dataset.train.rssi.dtype == np.float32
    assert mini_dataset.meta["config_hash"] == mini_config.lineage_hash()
    assert mini_dataset.meta["adversarial"] is False


def test_snr_of_label_beam(mini_config, mini_dataset) -> None:
    H = synthesize_channel_set(mini_config.scenario, mini_config.scenario_seed)
    narrow = odft_codebook(mini_config.scenario.n_bs, mini_config.sweep.oversampling)
    p_rx = float(dbm_to_watt(mini_config.sweep.p_rx_dbm))
    sigma2 = float(dbm_to_watt(mini_config.noise.noise_power_dbm))
    split = mini_dataset.validation
    for ue, label, snr_db in zip(split.ue_ids[:10], split.labels[:10], split.snr_db[:10]):
        expected = 10 * math.log10(snr(H[ue], narrow[label], p_rx, sigma2))
        assert snr_db == pytest.approx(expected, abs=1e-3)


def test_noiseless_dataset_reports_infinite_snr(tmp_path) -> None:
    config = RunConfig.from_dict(mini_config_dict(tmp_path, noise={"mode": "none"}, scenario={"n_ue": 40}))
    dataset = build_dataset(config)
    assert np.all(np.isinf(dataset.train.snr_db))


def test_dataset_files_are_byte_identical(tmp_path, mini_config) -> None:
    first = write_dataset(build_dataset(mini_config), tmp_path / "a.bae")
    second = write_dataset(build_dataset(mini_config), tmp_path / "b.bae")
    assert first.read_bytes() == second.read_bytes()


def test_dataset_file_contents(tmp_path, mini_dataset) -> None:
    path = write_dataset(mini_dataset, tmp_path / "dataset.bae")
    restored = read_dataset(path)
    assert restored.meta == mini_dataset.meta
    for name in SPLITS:
        original, loaded = mini_dataset.split(name), restored.split(name)
        np.testing.assert_array_equal(loaded.rssi, original.rssi)
        np.testing.assert_array_equal(loaded.labels, original.labels)
        np.testing.assert_array_equal(loaded.ue_ids, original.ue_ids)

    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        read_dataset(path)


def test_check_disjoint(mini_dataset) -> None:
    check_disjoint(mini_dataset.train, mini_dataset.calibration)
    leaked = Split(
        np.concatenate([mini_dataset.calibration.rssi, mini_dataset.train.rssi[:1]]),
        np.concatenate([mini_dataset.calibration.labels, mini_dataset.train.labels[:1]]),
        np.concatenate([mini_dataset.calibration.snr_db, mini_dataset.train.snr_db[:1]]),
        np.concatenate([mini_dataset.calibration.ue_ids, mini_dataset.train.ue_ids[:1]]),
    )
    with pytest.raises(SplitOverlapError):
        check_disjoint(mini_dataset.train, leaked)


def test_split_rejects_ragged_columns() -> None:
    with pytest.raises(InvalidArgumentError):
        Split(np.zeros((3, 4)), np.zeros(2), np.zeros(3), np.zeros(3))


def test_labels_do_not_depend_on_the_noise_draw(tmp_path) -> None:
    noise_models = (
        {"mode": "none"},
        {"mode": "fixed", "noise_power_dbm": -40.0},
        {"mode": "ranged", "noise_power_range_dbm": [-90.0, -28.0], "per_sample_draw": True},
    )
    datasets = [
        build_dataset(RunConfig.from_dict(mini_config_dict(tmp_path, noise=noise, scenario={"n_ue": 80})))
        for noise in noise_models
    ]
    reference = datasets[0]
    for dataset in datasets[1:]:
        for name in SPLITS:
            np.testing.assert_array_equal(dataset.split(name).labels, reference.split(name).labels)
            np.testing.assert_array_equal(dataset.split(name).ue_ids, reference.split(name).ue_ids)
    assert not np.array_equal(datasets[1].train.rssi, reference.train.rssi)


def test_mean_snr_falls_as_noise_rises(tmp_path) -> None:
    means = []
    for level in (-90.0, -70.0, -50.0):
        noise = {"mode": "fixed", "noise_power_dbm": level}
        dataset = build_dataset(RunConfig.from_dict(mini_config_dict(tmp_path, noise=noise, scenario={"n_ue": 80})))
        means.append(float(np.mean(np.concatenate([dataset.split(name).snr_db for name in SPLITS]))))
    assert means[0] > means[1] > means[2]
    assert means[0] - means[1] == pytest.approx(20.0, abs=1e-3)


def test_find_returns_the_sample_record(mini_dataset) -> None:
    held = mini_dataset.calibration
    name, sample = mini_dataset.find(int(held.ue_ids[2]))
    assert name == "calibration"
    assert sample.label == held.labels[2]
    assert sample.snr_db == pytest.approx(float(held.snr_db[2]))
    np.testing.assert_array_equal(sample.rssi, held.rssi[2])
    with pytest.raises(InvalidArgumentError):
        mini_dataset.find(10**6)
