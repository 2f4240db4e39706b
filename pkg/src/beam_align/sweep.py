"""Simulate RSSI beam sweeps, label samples and materialize datasets.

Labels come from the noiseless narrow-beam gains; features are the measured
received powers over the sensing beams, stored in linear watts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Final, Optional

import numpy as np

from beam_align.channel import synthesize_channel_set
from beam_align.codebook import Codebook, odft_codebook, sensing_codebook, sensing_indices
from beam_align.configuration import NoiseMode, NoiseModel, RunConfig, SplitFractions
from beam_align.errors import DataFormatError, DegenerateInputError, InvalidArgumentError, SplitOverlapError
from beam_align.formats import read_container, write_container
from beam_align.utils import dbm_to_watt, stable_hash, substream, to_builtin

logger = logging.getLogger(__name__)

DATASET_MAGIC: Final = b"BAE1"
DATASET_VERSION: Final = 1
SPLITS: Final = ("train", "validation", "calibration", "test")


@dataclass(frozen=True)
class Sample:
    """One labeled sweep: sensing RSSI, optimal narrow beam and provenance."""

    rssi: np.ndarray
    label: int
    snr_db: float
    ue_id: int


@dataclass(eq=False)
class Split:
    """Column-wise storage of the samples of one split."""

    rssi: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    ue_ids: np.ndarray

    def __post_init__(self) -> None:
        self.rssi = np.ascontiguousarray(self.rssi, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float32)
        self.ue_ids = np.asarray(self.ue_ids, dtype=np.int64)
        n = self.labels.shape[0]
        if self.rssi.ndim != 2 or self.rssi.shape[0] != n or self.snr_db.shape[0] != n or self.ue_ids.shape[0] != n:
            raise InvalidArgumentError("split columns must have matching lengths")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def sample(self, position: int) -> Sample:
        """Return the record at ``position``."""
        return Sample(
            self.rssi[position], int(self.labels[position]), float(self.snr_db[position]), int(self.ue_ids[position])
        )

    def subset(self, index: np.ndarray) -> Split:
        """Return the samples at ``index``."""
        return Split(self.rssi[index], self.labels[index], self.snr_db[index], self.ue_ids[index])

    def with_features(self, rssi: np.ndarray) -> Split:
        """Return a copy carrying different features for the same samples."""
        return Split(rssi, self.labels.copy(), self.snr_db.copy(), self.ue_ids.copy())

    @classmethod
    def empty(cls, m_w: int) -> Split:
        """A split with no samples."""
        return cls(np.zeros((0, m_w), np.float32), np.zeros(0), np.zeros(0), np.zeros(0))


@dataclass(eq=False)
class Dataset:
    """The four splits plus generation metadata."""

    train: Split
    validation: Split
    calibration: Split
    test: Split
    meta: dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> Split:
        """Return the split called ``name``."""
        if name not in SPLITS:
            raise InvalidArgumentError(f"unknown split {name!r}")
        return getattr(self, name)

    def find(self, ue_id: int) -> tuple[str, Sample]:
        """Return the split name and record of the sample drawn for UE ``ue_id``."""
        for name in SPLITS:
            split = self.split(name)
            hits = np.flatnonzero(split.ue_ids == ue_id)
            if hits.size:
                return name, split.sample(int(hits[0]))
        raise InvalidArgumentError(f"no sample with UE id {ue_id}")

    @property
    def m_w(self) -> int:
        """Number of sensing beams (feature length)."""
        return int(self.meta["m_w"])

    @property
    def q(self) -> int:
        """Number of narrow beams (classes)."""
        return int(self.meta["q"])


def beamform_gain(h: np.ndarray, w: np.ndarray) -> float:
    """Return |h^H w|^2."""
    h = np.asarray(h)
    w = np.asarray(w)
    if h.shape != w.shape:
        raise InvalidArgumentError(f"channel {h.shape} and beam {w.shape} lengths differ")
    return float(np.abs(np.vdot(h, w)) ** 2)


def gains_matrix(H: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Return |h_u^H w_q|^2 for every channel row u and beam q, shape (n, Q)."""
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    return np.abs(H.conj() @ codebook.beams.T) ** 2


def snr(h: np.ndarray, w: np.ndarray, p_bs: float, sigma2: float) -> float:
    """Return the linear SNR p_bs |h^H w|^2 / sigma2."""
    if not sigma2 > 0:
        raise InvalidArgumentError(f"noise power must be > 0, got {sigma2}")
    return p_bs * beamform_gain(h, w) / sigma2


def optimal_beam(h: np.ndarray, narrow: Codebook) -> int:
    """Index of the narrow beam with the highest gain; ties go to the lowest index."""
    return int(np.argmax(gains_matrix(h, narrow)[0]))


def draw_noise_power(noise: NoiseModel, rng: np.random.Generator) -> float:
    """Return the noise power in watts for one measurement."""
    if noise.mode == NoiseMode.NONE:
        return 0.0
    if noise.mode == NoiseMode.FIXED:
        return float(dbm_to_watt(noise.noise_power_dbm))
    low, high = noise.noise_power_range_dbm
    return float(dbm_to_watt(rng.uniform(low, high)))


def resolve_noise(noise: NoiseModel, seed: int) -> NoiseModel:
    """Turn a once-per-dataset ranged draw into the equivalent fixed model."""
    if noise.mode != NoiseMode.RANGED or noise.per_sample_draw:
        return noise
    low, high = noise.noise_power_range_dbm
    level = float(substream(seed, "noise_level").uniform(low, high))
    logger.info("Drew dataset-wide noise power %.2f dBm", level)
    return replace(noise, mode=NoiseMode.FIXED, noise_power_dbm=level)


def measure_rssi(
        h: np.ndarray,
        sensing: Codebook,
        p_bs: float,
        noise: NoiseModel,
        rng: np.random.Generator,
) -> np.ndarray:
    """Measure received power over each sensing beam with a unit pilot.

    Entry i is |sqrt(p_bs) h^H w_i + z_i|^2 where z_i is circularly symmetric
    complex Gaussian with the drawn noise power.
    """
    return sweep_beams(h, sensing, p_bs, draw_noise_power(noise, rng), rng)


def sweep_beams(
        h: np.ndarray,
        beams: Codebook,
        p_bs: float,
        sigma2: float,
        rng: np.random.Generator,
) -> np.ndarray:
    """Measure received power over ``beams`` at a known noise power (watts)."""
    y = math.sqrt(p_bs) * (beams.beams @ np.conj(h))
    if sigma2 > 0:
        z = rng.standard_normal(len(beams)) + 1j * rng.standard_normal(len(beams))
        y = y + math.sqrt(sigma2 / 2.0) * z
    return np.abs(y) ** 2


def split_sizes(n: int, fractions: SplitFractions) -> dict[str, int]:
    """Per-split sample counts; train, validation and calibration are rounded, test takes the rest."""
    sizes = {
        "train": int(round(n * fractions.train)),
        "validation": int(round(n * fractions.validation)),
        "calibration": int(round(n * fractions.calibration)),
    }
    overflow = sum(sizes.values()) - n
    if overflow > 0:
        sizes["train"] -= overflow
    sizes["test"] = n - sum(sizes.values())
    return sizes


def build_dataset(config: RunConfig, channels: Optional[np.ndarray] = None) -> Dataset:
    """Synthesize, label, measure and split a dataset.

    Args:
        config: The run configuration (scenario, sweep, noise, seed).
        channels: Pre-synthesized normalized channels; generated when omitted.
    """
    scenario = config.scenario
    if scenario.n_ue < 1:
        raise DegenerateInputError("scenario has no UEs")
    H = synthesize_channel_set(scenario, config.scenario_seed) if channels is None else channels
    narrow = odft_codebook(scenario.n_bs, config.sweep.oversampling)
    sensing = sensing_codebook(scenario.n_bs, config.m_w)

    narrow_gains = gains_matrix(H, narrow)
    labels = np.argmax(narrow_gains, axis=1)
    best_gain = narrow_gains[np.arange(len(labels)), labels]

    p_rx = float(dbm_to_watt(config.sweep.p_rx_dbm))
    noise = resolve_noise(config.noise, config.seed)
    rssi = np.empty((scenario.n_ue, config.m_w), dtype=np.float32)
    snr_db = np.empty(scenario.n_ue, dtype=np.float32)
    for ue in range(scenario.n_ue):
        rng = substream(config.seed, "noise", ue)
        sigma2 = draw_noise_power(noise, rng)
        rssi[ue] = sweep_beams(H[ue], sensing, p_rx, sigma2, rng)
        snr_db[ue] = 10.0 * math.log10(p_rx * best_gain[ue] / sigma2) if sigma2 > 0 else math.inf

    sizes = split_sizes(scenario.n_ue, config.sweep.fractions)
    order = substream(config.seed, "split").permutation(scenario.n_ue)
    splits: dict[str, Split] = {}
    start = 0
    for name in SPLITS:
        index = np.sort(order[start: start + sizes[name]])
        start += sizes[name]
        splits[name] = Split(rssi[index], labels[index], snr_db[index], index)

    meta = dataset_meta(config, noise)
    logger.info(
        "Built dataset: %s (m_w=%d, q=%d)",
        ", ".join(f"{name}={len(split)}" for name, split in splits.items()),
        config.m_w,
        len(narrow),
    )
    return Dataset(**splits, meta=meta)


def dataset_meta(config: RunConfig, noise: NoiseModel) -> dict[str, Any]:
    """Header metadata recorded with every dataset."""
    plain = config.to_dict()
    return to_builtin(
        {
            "m_w": config.m_w,
            "q": config.n_narrow,
            "n_bs": config.scenario.n_bs,
            "oversampling": config.sweep.oversampling,
            "sensing_indices": sensing_indices(config.scenario.n_bs, config.m_w),
            "p_bs_dbm": config.sweep.p_bs_dbm,
            "path_loss_db": config.sweep.path_loss_db,
            "p_rx_dbm": config.sweep.p_rx_dbm,
            "noise": plain["noise"] | {"resolved": to_builtin(_plain_noise(noise))},
            "seed": config.seed,
            "scenario_seed": config.scenario_seed,
            "scenario_hash": stable_hash(plain["scenario"]),
            "config_hash": config.lineage_hash(),
            "feature_scale": config.sweep.feature_scale.value,
            "feature_unit": "watt",
            "adversarial": False,
        }
    )


def _plain_noise(noise: NoiseModel) -> dict[str, Any]:
    return {
        "mode": noise.mode.value,
        "noise_power_dbm": noise.noise_power_dbm,
        "noise_power_range_dbm": list(noise.noise_power_range_dbm),
        "per_sample_draw": noise.per_sample_draw,
    }


def verify_labels(dataset: Dataset, channels: np.ndarray, narrow: Codebook) -> int:
    """Recount every label with a per-beam exhaustive search and return the mismatches."""
    mismatches = 0
    for name in SPLITS:
        split = dataset.split(name)
        for ue_id, label in zip(split.ue_ids, split.labels):
            h = channels[ue_id]
            best_q, best_gain = 0, -1.0
            for q in range(len(narrow)):
                gain = abs(np.vdot(h, narrow.beams[q])) ** 2
                if gain > best_gain:
                    best_q, best_gain = q, gain
            if best_q != label:
                mismatches += 1
                logger.warning("Label mismatch for UE %d: stored %d, exhaustive %d", ue_id, label, best_q)
    return mismatches


def check_disjoint(first: Split, second: Split, names: tuple[str, str] = ("train", "calibration")) -> None:
    """Raise :class:`SplitOverlapError` when two splits share a sample."""
    shared = np.intersect1d(first.ue_ids, second.ue_ids)
    if shared.size:
        raise SplitOverlapError(
            f"{shared.size} samples appear in both {names[0]} and {names[1]} (e.g. UE {int(shared[0])})"
        )


def _record_dtype(m_w: int) -> np.dtype:
    return np.dtype([("rssi", "<f4", (m_w,)), ("label", "<u2"), ("snr_db", "<f4")])


def write_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write a dataset in the BAE1 container format."""
    dtype = _record_dtype(dataset.m_w)
    chunks = []
    for name in SPLITS:
        split = dataset.split(name)
        records = np.empty(len(split), dtype=dtype)
        records["rssi"] = split.rssi
        records["label"] = split.labels
        records["snr_db"] = split.snr_db
        chunks.append(records.tobytes())
    header = {
        **dataset.meta,
        "version": DATASET_VERSION,
        "counts": {name: len(dataset.split(name)) for name in SPLITS},
        "ue_ids": {name: dataset.split(name).ue_ids.tolist() for name in SPLITS},
    }
    path = write_container(path, DATASET_MAGIC, header, b"".join(chunks))
    logger.info("Wrote dataset %s", path)
    return path


def read_dataset(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`write_dataset`."""

    def body_size(header: dict[str, Any]) -> int:
        try:
            return _record_dtype(int(header["m_w"])).itemsize * sum(int(header["counts"][s]) for s in SPLITS)
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: dataset header is incomplete") from e

    header, body = read_container(path, DATASET_MAGIC, DATASET_VERSION, body_size)
    dtype = _record_dtype(int(header["m_w"]))
    splits: dict[str, Split] = {}
    offset = 0
    for name in SPLITS:
        count = int(header["counts"][name])
        records = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        offset += count * dtype.itemsize
        ue_ids = header["ue_ids"][name]
        if len(ue_ids) != count:
            raise DataFormatError(f"{path}: split {name} has {count} records but {len(ue_ids)} ids")
        splits[name] = Split(
            records["rssi"].copy(), records["label"].astype(np.int64), records["snr_db"].copy(), ue_ids
        )
    meta = {k: v for k, v in header.items() if k not in ("version", "counts", "ue_ids")}
    return Dataset(**splits, meta=meta)
