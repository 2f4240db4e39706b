"""Synthesize geometric multipath channels for a uniform linear array.

A channel is the sum of L plane waves, h = sum_l alpha_l * b(phi_l), where
b is the unit-norm array response. Channel sets are normalized by their
largest entry magnitude before use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from beam_align.configuration import AngleSampling, GainModel, ScenarioConfig
from beam_align.errors import DegenerateInputError, InvalidArgumentError
from beam_align.formats import read_complex_rows, write_complex_rows
from beam_align.utils import substream

logger = logging.getLogger(__name__)

# Complex antenna-domain channel of one UE, shape (n_bs,), complex128.
ChannelVector = np.ndarray


@dataclass(frozen=True, eq=False)
class PathSet:
    """Complex gains and departure angles of the L paths of one UE."""

    gains: np.ndarray
    angles: np.ndarray

    def __post_init__(self) -> None:
        if self.gains.shape != self.angles.shape or self.gains.ndim != 1:
            raise InvalidArgumentError(
                f"gains {self.gains.shape} and angles {self.angles.shape} must be equal-length vectors"
            )

    def __len__(self) -> int:
        return int(self.gains.shape[0])


def array_response(phi: float, n_bs: int, d_over_lambda: float) -> np.ndarray:
    """Return the ULA response b(phi), entry n = exp(j 2 pi d n sin(phi)) / sqrt(n_bs)."""
    if not math.isfinite(phi):
        raise InvalidArgumentError(f"departure angle must be finite, got {phi}")
    if n_bs < 1:
        raise InvalidArgumentError(f"n_bs must be >= 1, got {n_bs}")
    n = np.arange(n_bs, dtype=np.float64)
    return np.exp(1j * 2.0 * np.pi * d_over_lambda * n * math.sin(phi)) / math.sqrt(n_bs)


def steering_matrix(angles: np.ndarray, n_bs: int, d_over_lambda: float) -> np.ndarray:
    """Return array responses for several angles, shape (len(angles), n_bs)."""
    angles = np.asarray(angles, dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise InvalidArgumentError("departure angles must be finite")
    n = np.arange(n_bs, dtype=np.float64)
    phase = 2.0 * np.pi * d_over_lambda * np.outer(np.sin(angles), n)
    return np.exp(1j * phase) / math.sqrt(n_bs)


def synth_paths(rng: np.random.Generator, config: ScenarioConfig) -> PathSet:
    """Draw the L paths of one UE from ``rng``.

    Draw order is fixed (angles, magnitudes, phases) so a given stream state
    always yields the same PathSet.
    """
    n_paths = config.n_paths
    low, high = config.angle_range
    if config.angle_sampling == AngleSampling.UNIFORM_SINE:
        angles = np.arcsin(rng.uniform(math.sin(low), math.sin(high), n_paths))
    else:
        angles = rng.uniform(low, high, n_paths)

    # Rayleigh scale such that the mean amplitude equals nlos_mean_amplitude.
    sigma = config.nlos_mean_amplitude / math.sqrt(math.pi / 2.0)
    magnitudes = rng.rayleigh(sigma, n_paths)
    if config.gain_model == GainModel.LOS_DOMINANT:
        magnitudes[0] = config.los_amplitude
        magnitudes[1:] = np.minimum(magnitudes[1:], config.los_amplitude)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_paths)
    return PathSet(gains=magnitudes * np.exp(1j * phases), angles=angles)


def assemble_channel(paths: PathSet, config: ScenarioConfig) -> ChannelVector:
    """Sum the path contributions into the antenna-domain channel."""
    responses = steering_matrix(paths.angles, config.n_bs, config.d_over_lambda)
    return paths.gains @ responses


def normalize_channel_set(channels: np.ndarray | list[np.ndarray]) -> np.ndarray:
    """Divide every entry by the largest entry magnitude over the whole set."""
    H = np.asarray(channels, dtype=np.complex128)
    if H.size == 0:
        raise DegenerateInputError("cannot normalize an empty channel set")
    peak = float(np.max(np.abs(H)))
    if peak == 0.0 or not math.isfinite(peak):
        raise DegenerateInputError(f"channel set has no usable entries (peak magnitude {peak})")
    return H / peak


def synthesize_channel_set(config: ScenarioConfig, seed: int) -> np.ndarray:
    """Generate and normalize the channels of every UE, shape (n_ue, n_bs).

    Each UE draws from its own substream, so the result does not depend on
    generation order.
    """
    if config.n_ue < 1:
        raise DegenerateInputError("scenario has no UEs")
    H = np.empty((config.n_ue, config.n_bs), dtype=np.complex128)
    for ue in range(config.n_ue):
        H[ue] = assemble_channel(synth_paths(substream(seed, "paths", ue), config), config)
    logger.info("Synthesized %d channels (%s, L=%d)", config.n_ue, config.gain_model.value, config.n_paths)
    return normalize_channel_set(H)


def export_channels(path: str | Path, channels: np.ndarray, config: ScenarioConfig, seed: int) -> Path:
    """Write a channel set as interleaved float64 rows with a JSON sidecar."""
    return write_complex_rows(
        path,
        channels,
        {"kind": "channels", "n_bs": config.n_bs, "n_paths": config.n_paths, "seed": seed},
    )


def read_channels(path: str | Path) -> np.ndarray:
    """Read a channel set written by :func:`export_channels`."""
    rows, _ = read_complex_rows(path)
    return rows
