"""Evaluate the learned heads and the codebook baselines on the test channels.

Accuracy and spectral-efficiency curves are binned by the configured noise
power; every level re-measures the test channels with its own noise
substream. Spectral efficiency of a chosen beam is always computed on the
noiseless channel gain.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Final, Optional, Sequence

import numpy as np

from beam_align.codebook import odft_codebook, quantized_mrt_beam, sensing_indices
from beam_align.configuration import RunConfig
from beam_align.dknn import CalibrationScores, DknnBatch, NeighborIndex, dknn_predict_batch, dknn_rank
from beam_align.errors import ConfigError, InvalidArgumentError
from beam_align.model import ModelState, infer, rank_beams, softmax
from beam_align.sweep import Dataset, Split, gains_matrix, snr, sweep_beams
from beam_align.utils import dbm_to_watt, substream, to_builtin

logger = logging.getLogger(__name__)

SNR_CONVENTION: Final = "configured noise power; snr_db is the mean best-beam SNR at that level"
_GAIN_TOL: Final = 1e-12


class Method(str, Enum):
    """Beam selection methods compared by the evaluation."""

    DKNN = "dknn"
    SOFTMAX = "softmax"
    DKNN_REFINED = "dknn_refined"
    SOFTMAX_REFINED = "softmax_refined"
    DFT = "dft"
    ODFT = "odft"
    MRT_QUANTIZED = "mrt_quantized"


def topk_accuracy(predictions: np.ndarray | Sequence[Sequence[int]], labels: np.ndarray, k: Optional[int] = None) -> float:
    """Fraction of samples whose label is among the first ``k`` predictions (all when ``k`` is None)."""
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise InvalidArgumentError(f"{len(predictions)} prediction lists for {len(labels)} labels")
    if len(labels) == 0:
        return math.nan
    hits = [int(label) in list(pred)[:k] for pred, label in zip(predictions, labels)]
    return float(np.mean(hits))


def spectral_efficiency(h: np.ndarray, w: np.ndarray, p_bs: float, sigma2: float) -> float:
    """Return log2(1 + SNR) in bits/s/Hz."""
    return math.log2(1.0 + snr(h, w, p_bs, sigma2))


def sweep_overhead(method: Method | str, *, n_bs: int, oversampling: int = 1, m_w: Optional[int] = None, k: int = 0) -> Optional[int]:
    """Number of beams swept by ``method``; None for the perfect-CSI upper bound."""
    method = Method(method)
    if method == Method.DFT:
        return n_bs
    if method == Method.ODFT:
        return n_bs * oversampling
    if method == Method.MRT_QUANTIZED:
        return None
    sensing = n_bs if m_w is None else m_w
    if method in (Method.DKNN_REFINED, Method.SOFTMAX_REFINED):
        return sensing + k
    return sensing


@dataclass(frozen=True)
class ReliabilityDiagram:
    """Per-bin sample counts and accuracies of a score over S equal bins of [0, 1]."""

    source: str
    n_bins: int
    low: list[float]
    high: list[float]
    counts: list[int]
    accuracy: list[Optional[float]]
    mean_score: list[Optional[float]]

    @property
    def total(self) -> int:
        """Number of binned samples."""
        return int(sum(self.counts))

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return asdict(self)


def reliability_diagram(scores: np.ndarray, correct: np.ndarray, n_bins: int, source: str = "dknn") -> ReliabilityDiagram:
    """Bin scores into ``n_bins`` equal intervals and report the accuracy of each bin.

    Bin s holds scores in [s/S, (s+1)/S); the last bin also holds 1.0. Empty
    bins report a null accuracy.
    """
    if n_bins < 1:
        raise InvalidArgumentError(f"n_bins must be >= 1, got {n_bins}")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if scores.shape != correct.shape:
        raise InvalidArgumentError("scores and correctness flags must have equal lengths")
    if scores.size and (np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores))):
        raise InvalidArgumentError("scores must lie in [0, 1]")
    edges = np.arange(n_bins + 1) / n_bins
    bins = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    hits = np.bincount(bins, weights=correct.astype(np.float64), minlength=n_bins)
    sums = np.bincount(bins, weights=scores, minlength=n_bins)
    return ReliabilityDiagram(
        source=source,
        n_bins=n_bins,
        low=[s / n_bins for s in range(n_bins)],
        high=[(s + 1) / n_bins for s in range(n_bins)],
        counts=[int(c) for c in counts],
        accuracy=[float(h / c) if c else None for h, c in zip(hits, counts)],
        mean_score=[float(v / c) if c else None for v, c in zip(sums, counts)],
    )


def robustness_summary(
        dknn_credibility: np.ndarray, softmax_confidence: np.ndarray, thresholds: Sequence[float]
) -> list[dict[str, Any]]:
    """Share of inputs flagged below each threshold by DkNN credibility and by softmax confidence."""
    dknn_credibility = np.asarray(dknn_credibility, dtype=np.float64)
    softmax_confidence = np.asarray(softmax_confidence, dtype=np.float64)
    rows = []
    for threshold in thresholds:
        dknn_share = float(np.mean(dknn_credibility < threshold)) if dknn_credibility.size else math.nan
        softmax_share = float(np.mean(softmax_confidence < threshold)) if softmax_confidence.size else math.nan
        rows.append(
            {
                "threshold": float(threshold),
                "dknn_fraction": dknn_share,
                "softmax_fraction": softmax_share,
                "ratio": dknn_share / softmax_share if softmax_share > 0 else None,
            }
        )
    return rows


@dataclass
class MetricsReport:
    """Everything the evaluation produces, in JSON-ready form."""

    meta: dict[str, Any] = field(default_factory=dict)
    methods: dict[str, Any] = field(default_factory=dict)
    test_split: dict[str, Any] = field(default_factory=dict)
    adversarial: Optional[dict[str, Any]] = None
    noise_sweep: list[dict[str, Any]] = field(default_factory=list)
    reliability: dict[str, Any] = field(default_factory=dict)
    robustness: list[dict[str, Any]] = field(default_factory=list)
    se_ordering_violations: dict[str, int] = field(default_factory=dict)
    overhead: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Return the report with numpy values converted and non-finite numbers as null."""
        return to_builtin(asdict(self))


def _head_metrics(
        split: Split, state: ModelState, index: NeighborIndex, calibration: CalibrationScores, k_list: Sequence[int]
) -> tuple[dict[str, Any], DknnBatch, np.ndarray]:
    verdicts = dknn_predict_batch(split.rssi, index, calibration, state)
    probs = softmax(verdicts.logits)
    confidence = np.max(probs, axis=1)
    k_max = max(k_list)
    softmax_ranked = rank_beams(verdicts.logits, k_max)
    dknn_ranked = dknn_rank(verdicts.p_values, verdicts.logits, k_max)
    metrics = {
        "n": len(split),
        "dknn": {
            "topk_accuracy": {str(k): topk_accuracy(dknn_ranked, split.labels, k) for k in k_list},
            "mean_credibility": float(np.mean(verdicts.credibility)),
            "mean_confidence": float(np.mean(verdicts.confidence)),
        },
        "softmax": {
            "topk_accuracy": {str(k): topk_accuracy(softmax_ranked, split.labels, k) for k in k_list},
            "mean_confidence": float(np.mean(confidence)),
        },
    }
    return metrics, verdicts, confidence


def sensing_features(measured: np.ndarray, n_bs: int, m_w: int, oversampling: int) -> np.ndarray:
    """Pick the sensing-beam columns out of a full narrow-beam sweep, as float32 features."""
    return measured[:, sensing_indices(n_bs, m_w) * oversampling].astype(np.float32)


def _ranked_measurements(measured: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-measured, axis=1, kind="stable")[:, :k]


def _refine(candidates: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """Among each row's candidate beams keep the one with the highest measured power."""
    values = np.take_along_axis(measured, candidates, axis=1)
    return candidates[np.arange(candidates.shape[0]), np.argmax(values, axis=1)]


def evaluate_all(
        state: ModelState,
        index: NeighborIndex,
        calibration: Optional[CalibrationScores],
        dataset: Dataset,
        channels: np.ndarray,
        config: RunConfig,
        adversarial: Optional[Split] = None,
        attack_meta: Optional[dict[str, Any]] = None,
) -> MetricsReport:
    """Compare the DkNN and softmax heads with the DFT, O-DFT and quantized-MRT baselines.

    Args:
        state: Trained classifier.
        index: Neighbor index built from the train split.
        calibration: Calibration scores; required.
        dataset: The dataset whose test split is evaluated.
        channels: The normalized channel set the dataset was generated from.
        config: Run configuration (eval protocol, sweep, seed).
        adversarial: Optional FGSM version of the test split.
        attack_meta: Attack settings recorded with the adversarial set.
    """
    if calibration is None:
        raise ConfigError("evaluation needs calibration scores; run calibrate first")
    ev = config.eval
    test = dataset.test
    if len(test) == 0:
        raise InvalidArgumentError("the test split is empty")
    if max(ev.k_list) > dataset.q:
        raise ConfigError(f"eval.k_list entries must be <= {dataset.q}")
    n_bs, os_factor = config.scenario.n_bs, config.sweep.oversampling
    narrow = odft_codebook(n_bs, os_factor)
    p_rx = float(dbm_to_watt(config.sweep.p_rx_dbm))
    H = channels[test.ue_ids]
    labels = test.labels
    rows = np.arange(len(test))
    k_max = max(ev.k_list)
    refine_k = min(ev.refine_k, dataset.q)

    gains = gains_matrix(H, narrow)
    dft_gains = gains[:, ::os_factor]
    mrt_gains = np.array(
        [abs(np.vdot(h, quantized_mrt_beam(h, ev.mrt_bits, ev.mrt_phase_offsets))) ** 2 for h in H]
    )
    best = gains[rows, labels]

    test_metrics, clean_verdicts, clean_confidence = _head_metrics(test, state, index, calibration, ev.k_list)
    top1 = {
        Method.DKNN: clean_verdicts.predictions,
        Method.SOFTMAX: np.argmax(clean_verdicts.logits, axis=1),
    }
    violations = {
        "mrt_vs_odft": int(np.sum(mrt_gains < best * (1 - _GAIN_TOL))),
        "odft_vs_dft": int(np.sum(best < dft_gains.max(axis=1) * (1 - _GAIN_TOL))),
        "odft_vs_softmax_top1": int(np.sum(best < gains[rows, top1[Method.SOFTMAX]] * (1 - _GAIN_TOL))),
        "odft_vs_dknn_top1": int(np.sum(best < gains[rows, top1[Method.DKNN]] * (1 - _GAIN_TOL))),
    }
    if violations["mrt_vs_odft"]:
        logger.warning("%d test channels where the quantized upper bound falls below O-DFT", violations["mrt_vs_odft"])

    sweep_rows = []
    for level_idx, noise_dbm in enumerate(ev.noise_levels_dbm):
        sigma2 = float(dbm_to_watt(noise_dbm))
        measured = np.stack(
            [
                sweep_beams(h, narrow, p_rx, sigma2, substream(config.seed, "eval_noise", level_idx, int(ue)))
                for h, ue in zip(H, test.ue_ids)
            ]
        )
        features = sensing_features(measured, n_bs, dataset.m_w, os_factor)
        verdicts = dknn_predict_batch(features, index, calibration, state)
        softmax_ranked = rank_beams(verdicts.logits, max(k_max, refine_k))
        dknn_ranked = dknn_rank(verdicts.p_values, verdicts.logits, max(k_max, refine_k))
        dft_ranked = _ranked_measurements(measured[:, ::os_factor], min(k_max, n_bs)) * os_factor
        odft_ranked = _ranked_measurements(measured, k_max)
        choices = {
            Method.DKNN: dknn_ranked[:, 0],
            Method.SOFTMAX: softmax_ranked[:, 0],
            Method.DKNN_REFINED: _refine(dknn_ranked[:, :refine_k], measured),
            Method.SOFTMAX_REFINED: _refine(softmax_ranked[:, :refine_k], measured),
        }
        level_gains = {method: gains[rows, chosen] for method, chosen in choices.items()}
        level_gains[Method.DFT] = dft_gains.max(axis=1)
        level_gains[Method.ODFT] = best
        level_gains[Method.MRT_QUANTIZED] = mrt_gains
        ranked = {
            Method.DKNN: dknn_ranked,
            Method.SOFTMAX: softmax_ranked,
            Method.DFT: dft_ranked,
            Method.ODFT: odft_ranked,
        }
        methods: dict[str, Any] = {}
        for method in Method:
            entry: dict[str, Any] = {
                "mean_se": float(np.mean(np.log2(1.0 + p_rx * level_gains[method] / sigma2))),
            }
            if method in ranked:
                entry["topk_accuracy"] = {str(k): topk_accuracy(ranked[method], labels, k) for k in ev.k_list}
            elif method in (Method.DKNN_REFINED, Method.SOFTMAX_REFINED):
                entry["topk_accuracy"] = {"1": float(np.mean(choices[method] == labels))}
            methods[method.value] = entry
        sweep_rows.append(
            {
                "noise_power_dbm": float(noise_dbm),
                "snr_db": float(10.0 * math.log10(p_rx * float(np.mean(best)) / sigma2)),
                "methods": methods,
            }
        )
        logger.info(
            "Noise %.1f dBm: softmax top-%d %.3f, dknn top-%d %.3f",
            noise_dbm,
            ev.k_list[0],
            methods["softmax"]["topk_accuracy"][str(ev.k_list[0])],
            ev.k_list[0],
            methods["dknn"]["topk_accuracy"][str(ev.k_list[0])],
        )

    overhead = {
        method.value: sweep_overhead(method, n_bs=n_bs, oversampling=os_factor, m_w=dataset.m_w, k=refine_k)
        for method in Method
    }
    overhead["reduction_vs_odft"] = 1.0 - dataset.m_w / (n_bs * os_factor)

    summary: dict[str, Any] = {}
    for method in Method:
        per_level = [row["methods"][method.value] for row in sweep_rows]
        entry = {
            "mean_se": float(np.mean([row["mean_se"] for row in per_level])),
            "swept_beams": overhead[method.value],
        }
        if "topk_accuracy" in per_level[0]:
            entry["topk_accuracy"] = {
                key: float(np.mean([row["topk_accuracy"][key] for row in per_level]))
                for key in per_level[0]["topk_accuracy"]
            }
        summary[method.value] = entry

    dknn_correct = clean_verdicts.predictions == labels
    softmax_correct = top1[Method.SOFTMAX] == labels
    reliability = {
        "dknn_clean": reliability_diagram(clean_verdicts.credibility, dknn_correct, ev.n_bins, "dknn_credibility").to_dict(),
        "softmax_clean": reliability_diagram(clean_confidence, softmax_correct, ev.n_bins, "softmax_confidence").to_dict(),
    }

    adversarial_section = None
    robustness: list[dict[str, Any]] = []
    if adversarial is not None and len(adversarial):
        adv_metrics, adv_verdicts, adv_confidence = _head_metrics(adversarial, state, index, calibration, ev.k_list)
        adv_softmax = np.argmax(adv_verdicts.logits, axis=1)
        reliability["dknn_adversarial"] = reliability_diagram(
            adv_verdicts.credibility, adv_verdicts.predictions == adversarial.labels, ev.n_bins, "dknn_credibility"
        ).to_dict()
        reliability["softmax_adversarial"] = reliability_diagram(
            adv_confidence, adv_softmax == adversarial.labels, ev.n_bins, "softmax_confidence"
        ).to_dict()
        robustness = robustness_summary(adv_verdicts.credibility, adv_confidence, ev.credibility_thresholds)
        adversarial_section = {**adv_metrics, "attack": to_builtin(attack_meta or {})}
        logger.info(
            "Mean DkNN credibility: clean %.3f, adversarial %.3f",
            test_metrics["dknn"]["mean_credibility"],
            adv_metrics["dknn"]["mean_credibility"],
        )

    meta = {
        "seed": config.seed,
        "config_hash": dataset.meta.get("config_hash"),
        "n_test": len(test),
        "m_w": dataset.m_w,
        "q": dataset.q,
        "n_bs": n_bs,
        "oversampling": os_factor,
        "p_rx_dbm": config.sweep.p_rx_dbm,
        "k_list": list(ev.k_list),
        "refine_k": refine_k,
        "mrt_bits": ev.mrt_bits,
        "mrt_phase_offsets": ev.mrt_phase_offsets,
        "dknn_k": index.k,
        "dknn_layers": index.layer_ids,
        "dknn_backend": index.backend.value,
        "n_calibration": len(calibration),
        "snr_convention": SNR_CONVENTION,
        "reliability_bins": "bin s = [s/S, (s+1)/S), last bin closed; empty bins have null accuracy",
        "summary_convention": "method metrics are averaged over the noise levels",
    }
    return MetricsReport(
        meta=meta,
        methods=summary,
        test_split=test_metrics,
        adversarial=adversarial_section,
        noise_sweep=sweep_rows,
        reliability=reliability,
        robustness=robustness,
        se_ordering_violations=violations,
        overhead=overhead,
    )


def write_report(report: MetricsReport, path: str | Path) -> Path:
    """Write the report as sorted, indented JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote report %s", path)
    return path


def _write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(["" if value is None else value for value in row] for row in rows)
    return path


def write_figures(report: MetricsReport, directory: str | Path) -> list[Path]:
    """Write the plot-ready CSV tables.

    fig2 holds accuracy and fig3 spectral efficiency per noise level; fig4a and
    fig4b hold the DkNN and softmax reliability bins.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    accuracy_rows, se_rows = [], []
    for level in report.noise_sweep:
        for method, entry in sorted(level["methods"].items()):
            se_rows.append([level["noise_power_dbm"], level["snr_db"], method, entry["mean_se"]])
            for k, value in sorted(entry.get("topk_accuracy", {}).items(), key=lambda kv: int(kv[0])):
                accuracy_rows.append([level["noise_power_dbm"], level["snr_db"], method, int(k), value])
    paths = [
        _write_csv(directory / "fig2.csv", ["noise_power_dbm", "snr_db", "method", "k", "accuracy"], accuracy_rows),
        _write_csv(directory / "fig3.csv", ["noise_power_dbm", "snr_db", "method", "mean_se"], se_rows),
    ]
    for name, head in (("fig4a.csv", "dknn"), ("fig4b.csv", "softmax")):
        rows = []
        for key in (f"{head}_clean", f"{head}_adversarial"):
            diagram = report.reliability.get(key)
            if diagram is None:
                continue
            for s in range(diagram["n_bins"]):
                rows.append(
                    [
                        key.split("_", 1)[1],
                        s,
                        diagram["low"][s],
                        diagram["high"][s],
                        diagram["counts"][s],
                        diagram["accuracy"][s],
                    ]
                )
        paths.append(_write_csv(directory / name, ["set", "bin", "low", "high", "count", "accuracy"], rows))
    logger.info("Wrote figure tables to %s", directory)
    return paths
