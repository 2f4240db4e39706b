import cmath
import math

import numpy as np
import pytest

from beam_align.codebook import (
    Codebook,
    CodebookKind,
    dft_codebook,
    export_codebook,
    mrt_beam,
    odft_codebook,
    quantize_phases,
    quantized_mrt_beam,
    read_codebook,
    sensing_codebook,
    sensing_indices,
)
from beam_align.errors import DegenerateInputError, InvalidArgumentError


def _random_channel(seed: int, n: int = 16) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def test_odft_entries_and_size() -> None:
    n_bs, os = 8, 4
    codebook = odft_codebook(n_bs, os)
    assert len(codebook) == 32
    assert codebook.kind == CodebookKind.NARROW
    for q in (0, 1, 17, 31):
        for n in range(n_bs):
            expected = cmath.exp(-1j * 2 * math.pi * n * q / (n_bs * os)) / math.sqrt(n_bs)
            assert codebook[q][n] == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(codebook.beams, axis=1), 1.0)


def test_dft_is_orthonormal_and_nested_in_odft() -> None:
    dft = dft_codebook(8)
    np.testing.assert_allclose(dft.beams @ dft.beams.conj().T, np.eye(8), atol=1e-12)
    np.testing.assert_allclose(odft_codebook(8, 4).beams[::4], dft.beams, atol=1e-12)


def test_invalid_codebook_parameters() -> None:
    with pytest.raises(InvalidArgumentError):
        odft_codebook(0, 4)
    with pytest.raises(InvalidArgumentError):
        odft_codebook(8, 0)
    with pytest.raises(InvalidArgumentError):
        Codebook(beams=np.ones((2, 4), complex))


def test_sensing_subset() -> None:
    np.testing.assert_array_equal(sensing_indices(32, 8), np.arange(0, 32, 4))
    np.testing.assert_array_equal(sensing_indices(8, 8), np.arange(8))
    sensing = sensing_codebook(16, 4)
    np.testing.assert_allclose(sensing.beams, dft_codebook(16).beams[[0, 4, 8, 12]])
    with pytest.raises(InvalidArgumentError):
        sensing_indices(8, 9)


def test_quantize_phases() -> None:
    w = mrt_beam(_random_channel(0))
    quantized = quantize_phases(w, 2)
    step = 2 * math.pi / 4
    ratios = np.angle(quantized) / step
    np.testing.assert_allclose(ratios, np.round(ratios), atol=1e-9)
    np.testing.assert_allclose(np.abs(quantized), np.abs(w))
    assert np.all(np.abs(np.angle(quantized * np.conj(w))) <= step / 2 + 1e-12)
    with pytest.raises(InvalidArgumentError):
        quantize_phases(w, 0)


def test_mrt_maximizes_constant_modulus_gain() -> None:
    h = _random_channel(1)
    w = mrt_beam(h)
    gain = abs(np.vdot(h, w)) ** 2
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert gain == pytest.approx(np.sum(np.abs(h)) ** 2 / len(h))
    odft_gains = np.abs(odft_codebook(16, 4).beams @ np.conj(h)) ** 2
    assert gain >= odft_gains.max() - 1e-12


def test_quantized_mrt_phase_search_never_hurts() -> None:
    for seed in range(10):
        h = _random_channel(seed)
        plain = abs(np.vdot(h, quantized_mrt_beam(h, 4, 1))) ** 2
        searched = abs(np.vdot(h, quantized_mrt_beam(h, 4, 8))) ** 2
        assert searched >= plain - 1e-12
        np.testing.assert_allclose(quantized_mrt_beam(h, 4, 1), quantize_phases(mrt_beam(h), 4))


def test_mrt_rejects_zero_channel() -> None:
    with pytest.raises(DegenerateInputError):
        mrt_beam(np.zeros(4, complex))


def test_codebook_export_sidecar(tmp_path) -> None:
    codebook = odft_codebook(4, 2)
    path = export_codebook(tmp_path / "narrow.bin", codebook)
    assert path.stat().st_size == 8 * 4 * 16
    restored = read_codebook(path)
    assert restored.oversampling == 2
    assert restored.kind == CodebookKind.NARROW
    np.testing.assert_array_equal(restored.beams, codebook.beams)
