"""Build analog beamforming codebooks and constant-modulus baseline beams."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from beam_align.errors import DegenerateInputError, InvalidArgumentError
from beam_align.formats import read_complex_rows, write_complex_rows

# Unit-norm analog beamformer, shape (n_bs,), complex128.
BeamVector = np.ndarray

_NORM_TOL = 1e-9


class CodebookKind(str, Enum):
    """Role of a codebook in the sweep."""

    SENSING = "sensing"
    NARROW = "narrow"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class Codebook:
    """Ordered set of unit-norm beams, stored row-wise as (Q, n_bs)."""

    beams: np.ndarray
    kind: CodebookKind = CodebookKind.CUSTOM
    oversampling: int = 1

    def __post_init__(self) -> None:
        if self.beams.ndim != 2 or self.beams.shape[0] < 1:
            raise InvalidArgumentError(f"codebook must hold at least one beam, got shape {self.beams.shape}")
        norms = np.linalg.norm(self.beams, axis=1)
        if not np.allclose(norms, 1.0, atol=_NORM_TOL):
            raise InvalidArgumentError("every codebook beam must have unit norm")

    def __len__(self) -> int:
        return int(self.beams.shape[0])

    def __getitem__(self, q: int) -> BeamVector:
        return self.beams[q]

    @property
    def n_bs(self) -> int:
        """Number of antennas each beam drives."""
        return int(self.beams.shape[1])


def odft_codebook(n_bs: int, os: int) -> Codebook:
    """Oversampled DFT codebook, beam q entry n = exp(-j 2 pi n q / (n_bs os)) / sqrt(n_bs)."""
    if n_bs < 1:
        raise InvalidArgumentError(f"n_bs must be >= 1, got {n_bs}")
    if os < 1:
        raise InvalidArgumentError(f"oversampling must be >= 1, got {os}")
    size = n_bs * os
    q = np.arange(size, dtype=np.float64)
    n = np.arange(n_bs, dtype=np.float64)
    beams = np.exp(-1j * 2.0 * np.pi * np.outer(q, n) / size) / math.sqrt(n_bs)
    return Codebook(beams=beams, kind=CodebookKind.NARROW, oversampling=os)


def dft_codebook(n_bs: int) -> Codebook:
    """Plain DFT codebook with n_bs mutually orthogonal beams."""
    narrow = odft_codebook(n_bs, 1)
    return Codebook(beams=narrow.beams, kind=CodebookKind.SENSING, oversampling=1)


def sensing_indices(n_bs: int, m_w: int) -> np.ndarray:
    """Evenly spaced DFT indices of the M_w sensing beams."""
    if not 1 <= m_w <= n_bs:
        raise InvalidArgumentError(f"m_w must lie in [1, {n_bs}], got {m_w}")
    return (np.arange(m_w) * n_bs) // m_w


def sensing_codebook(n_bs: int, m_w: int) -> Codebook:
    """Subset of M_w DFT beams swept to produce the classifier features."""
    beams = dft_codebook(n_bs).beams[sensing_indices(n_bs, m_w)]
    return Codebook(beams=beams, kind=CodebookKind.SENSING, oversampling=1)


def quantize_phases(w: BeamVector, bits: int) -> BeamVector:
    """Round every entry phase to the nearest multiple of 2 pi / 2**bits."""
    if bits < 1:
        raise InvalidArgumentError(f"bits must be >= 1, got {bits}")
    step = 2.0 * np.pi / (1 << bits)
    w = np.asarray(w, dtype=np.complex128)
    return np.abs(w) * np.exp(1j * step * np.round(np.angle(w) / step))


def mrt_beam(h: np.ndarray) -> BeamVector:
    """Phase-aligned constant-modulus beam maximizing |h^H w|^2.

    Entry i is exp(j angle(h_i)) / sqrt(N), so every term conj(h_i) w_i of
    h^H w is real and non-negative.
    """
    h = np.asarray(h, dtype=np.complex128)
    if not np.any(h):
        raise DegenerateInputError("cannot steer towards an all-zero channel")
    return np.exp(1j * np.angle(h)) / math.sqrt(h.shape[0])


def quantized_mrt_beam(h: np.ndarray, bits: int, phase_offsets: int = 1) -> BeamVector:
    """Best phase-quantized MRT beam over common-phase rotations.

    |h^H w| does not depend on a global phase of w, so rotating before
    quantizing yields alternative quantized beams; offset 0 is the plain
    rounding of :func:`mrt_beam`.
    """
    base = mrt_beam(h)
    step = 2.0 * np.pi / (1 << bits)
    best, best_gain = None, -1.0
    for t in range(max(1, phase_offsets)):
        candidate = quantize_phases(base * np.exp(1j * step * t / phase_offsets), bits)
        gain = float(np.abs(np.vdot(h, candidate)) ** 2)
        if gain > best_gain:
            best, best_gain = candidate, gain
    return best


def export_codebook(path: str | Path, codebook: Codebook) -> Path:
    """Write a codebook as complex rows with a {n_bs, os, kind} sidecar."""
    return write_complex_rows(
        path,
        codebook.beams,
        {"n_bs": codebook.n_bs, "os": codebook.oversampling, "kind": codebook.kind.value},
    )


def read_codebook(path: str | Path) -> Codebook:
    """Read a codebook written by :func:`export_codebook`."""
    rows, meta = read_complex_rows(path)
    return Codebook(beams=rows, kind=CodebookKind(meta["kind"]), oversampling=int(meta["os"]))
