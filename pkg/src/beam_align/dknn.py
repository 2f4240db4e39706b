"""Deep k-nearest-neighbor credibility engine.

Training representations are indexed per hidden layer. A query's
nonconformity for candidate beam j counts the neighbors, over all indexed
layers, whose label differs from j; calibration scores turn that count into
a p-value per beam.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final, Optional, Sequence

import numpy as np

from beam_align.configuration import DknnBackend, DknnConfig
from beam_align.errors import ConfigError, DataFormatError, InvalidArgumentError, VersionMismatchError
from beam_align.formats import read_container, write_container
from beam_align.lsh import CrossPolytopeLSH
from beam_align.model import ModelState, infer
from beam_align.sweep import Split
from beam_align.utils import canonical_json, to_builtin

logger = logging.getLogger(__name__)

INDEX_MAGIC: Final = b"BAI1"
INDEX_VERSION: Final = 1
CALIBRATION_VERSION: Final = 1
_CHUNK: Final = 512


def _unit_rows(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    return vectors / np.where(norms == 0, 1.0, norms), zero


@dataclass(eq=False)
class NeighborIndex:
    """Per-layer training representations with their labels.

    ``layers`` holds the float32 activations of the indexed hidden layers,
    ``layer_ids`` their positions in the network.
    """

    layers: list[np.ndarray]
    labels: np.ndarray
    k: int
    layer_ids: list[int]
    backend: DknnBackend = DknnBackend.EXACT
    settings: DknnConfig = field(default_factory=DknnConfig)
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)
    _unit: list[np.ndarray] = field(init=False, repr=False)
    _hashers: Optional[list[CrossPolytopeLSH]] = field(init=False, repr=False, default=None)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.layers = [np.ascontiguousarray(layer, dtype=np.float32) for layer in self.layers]
        n = self.labels.shape[0]
        if any(layer.shape[0] != n for layer in self.layers):
            raise InvalidArgumentError("every layer must store one vector per training sample")
        if not 1 <= self.k <= n:
            raise InvalidArgumentError(f"k={self.k} must lie in [1, {n}] (training size)")
        self._unit = [_unit_rows(layer)[0] for layer in self.layers]
        if self.backend == DknnBackend.LSH:
            self._hashers = [
                CrossPolytopeLSH(
                    unit,
                    n_tables=self.settings.lsh_tables,
                    hashes_per_table=self.settings.lsh_hashes_per_table,
                    projection_dim=self.settings.lsh_projection_dim,
                    buckets_per_table=self.settings.lsh_buckets_per_table,
                    seed=self.seed,
                    layer=layer_id,
                )
                for unit, layer_id in zip(self._unit, self.layer_ids)
            ]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_layers(self) -> int:
        """Number of indexed layers."""
        return len(self.layers)

    def _exact(self, pos: int, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ids = np.empty((queries.shape[0], self.k), dtype=np.int64)
        sims = np.empty((queries.shape[0], self.k))
        for start in range(0, queries.shape[0], _CHUNK):
            block = queries[start: start + _CHUNK] @ self._unit[pos].T
            order = np.argsort(-block, axis=1, kind="stable")[:, : self.k]
            ids[start: start + _CHUNK] = order
            sims[start: start + _CHUNK] = np.take_along_axis(block, order, axis=1)
        return ids, sims

    def _lsh(self, pos: int, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        hits = self._hashers[pos].candidates(query)
        if len(hits) < self.k:
            ids, sims = self._exact(pos, query[None, :])
            return ids[0], sims[0]
        cand = np.fromiter(hits.keys(), dtype=np.int64, count=len(hits))
        cand.sort()
        sims = self._unit[pos][cand] @ query
        if self.settings.rerank:
            order = np.argsort(-sims, kind="stable")[: self.k]
        else:
            counts = np.array([hits[i] for i in cand])
            order = np.argsort(-counts, kind="stable")[: self.k]
        return cand[order], sims[order]

    def query(self, pos: int, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return the k neighbor ids and cosine similarities for each row of ``vectors``."""
        queries, _ = _unit_rows(np.atleast_2d(vectors).astype(np.float32))
        if self.backend == DknnBackend.EXACT:
            return self._exact(pos, queries)
        results = [self._lsh(pos, q) for q in queries]
        return np.stack([r[0] for r in results]), np.stack([r[1] for r in results])


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Neighbors of a batch of queries in every indexed layer: arrays of shape (n, layers, k)."""

    ids: np.ndarray
    labels: np.ndarray
    similarities: np.ndarray
    zero_query: np.ndarray
    logits: np.ndarray


@dataclass(frozen=True, eq=False)
class CalibrationScores:
    """Sorted nonconformity scores of the calibration split."""

    scores: np.ndarray
    k: int
    n_layers: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        scores = np.sort(np.asarray(self.scores, dtype=np.int64))
        if scores.size == 0:
            raise InvalidArgumentError("calibration scores are empty")
        if scores[0] < 0 or scores[-1] > self.k * self.n_layers:
            raise InvalidArgumentError(f"calibration scores must lie in [0, {self.k * self.n_layers}]")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class DknnVerdict:
    """Prediction, confidence and credibility of one query, with its neighbor evidence."""

    prediction: int
    confidence: float
    credibility: float
    p_values: np.ndarray
    neighbor_report: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready record."""
        return to_builtin(
            {
                "prediction": self.prediction,
                "confidence": self.confidence,
                "credibility": self.credibility,
                "p_values": self.p_values,
                "neighbor_report": self.neighbor_report,
            }
        )


@dataclass(frozen=True, eq=False)
class DknnBatch:
    """Verdict columns for a batch of queries."""

    predictions: np.ndarray
    confidence: np.ndarray
    credibility: np.ndarray
    p_values: np.ndarray
    logits: np.ndarray

    def __len__(self) -> int:
        return int(self.predictions.shape[0])


def _layer_ids(state: ModelState, mask: Optional[Sequence[int]]) -> list[int]:
    if mask is None:
        return list(range(state.n_hidden))
    ids = sorted(set(mask))
    if not ids or ids[0] < 0 or ids[-1] >= state.n_hidden:
        raise ConfigError(f"dknn.layer_mask must select layers in [0, {state.n_hidden}), got {list(mask)}")
    return ids


def build_index(
        state: ModelState,
        train: Split,
        config: DknnConfig,
        seed: int = 0,
        meta: Optional[dict[str, Any]] = None,
) -> NeighborIndex:
    """Record the training activations of every indexed layer."""
    if not 1 <= config.k <= len(train):
        raise InvalidArgumentError(f"dknn.k={config.k} must lie in [1, {len(train)}] (training size)")
    layer_ids = _layer_ids(state, config.layer_mask)
    _, acts = infer(train.rssi, state)
    index = NeighborIndex(
        layers=[acts.layers[i] for i in layer_ids],
        labels=train.labels,
        k=config.k,
        layer_ids=layer_ids,
        backend=config.backend,
        settings=config,
        seed=seed,
        meta=dict(meta or {}),
    )
    logger.info(
        "Indexed %d training samples over layers %s (%s backend, k=%d)",
        len(index),
        layer_ids,
        config.backend.value,
        config.k,
    )
    return index


def neighborhood(rssi: np.ndarray, index: NeighborIndex, state: ModelState) -> Neighborhood:
    """Run queries through the model and collect their per-layer neighbors."""
    logits, acts = infer(rssi, state)
    ids, sims, zero = [], [], []
    for pos, layer_id in enumerate(index.layer_ids):
        layer = acts.layers[layer_id]
        layer_ids, layer_sims = index.query(pos, layer)
        ids.append(layer_ids)
        sims.append(layer_sims)
        zero.append(~np.any(layer, axis=1))
    ids_arr = np.stack(ids, axis=1)
    return Neighborhood(
        ids=ids_arr,
        labels=index.labels[ids_arr],
        similarities=np.stack(sims, axis=1),
        zero_query=np.stack(zero, axis=1),
        logits=logits,
    )


def nearest_labels(x: np.ndarray, index: NeighborIndex, state: ModelState) -> list[np.ndarray]:
    """Per-layer neighbor label multisets of one RSSI vector."""
    return list(neighborhood(np.asarray(x)[None, :], index, state).labels[0])


def nonconformity(omega: Sequence[np.ndarray] | np.ndarray, j: int) -> int:
    """Count neighbor labels, over all layers, that differ from candidate ``j``."""
    return int(sum(np.count_nonzero(np.asarray(labels) != j) for labels in omega))


def nonconformity_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Scores for every candidate beam: labels (n, layers, k) to (n, Q) integers."""
    n = labels.shape[0]
    counts = np.zeros((n, n_classes), dtype=np.int64)
    rows = np.repeat(np.arange(n), labels.shape[1] * labels.shape[2])
    np.add.at(counts, (rows, labels.reshape(-1)), 1)
    return labels.shape[1] * labels.shape[2] - counts


def calibrate(
        index: NeighborIndex,
        state: ModelState,
        calibration: Split,
        meta: Optional[dict[str, Any]] = None,
) -> CalibrationScores:
    """Score every calibration sample against its true label."""
    if len(calibration) == 0:
        raise InvalidArgumentError("the calibration split is empty")
    hood = neighborhood(calibration.rssi, index, state)
    scores = nonconformity_matrix(hood.labels, state.n_classes)[np.arange(len(calibration)), calibration.labels]
    logger.info("Calibrated on %d samples (mean score %.2f)", len(calibration), float(np.mean(scores)))
    return CalibrationScores(scores=scores, k=index.k, n_layers=index.n_layers, meta=dict(meta or {}))


def p_values(scores: np.ndarray, calibration: CalibrationScores) -> np.ndarray:
    """Fraction of calibration scores greater than or equal to each score."""
    C = calibration.scores
    return (len(C) - np.searchsorted(C, np.asarray(scores), side="left")) / len(C)


def p_value(score: int, calibration: CalibrationScores) -> float:
    """Fraction of calibration scores greater than or equal to ``score``."""
    return float(p_values(np.array([score]), calibration)[0])


def summarize_p_values(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prediction, confidence and credibility for rows of p-values."""
    p = np.atleast_2d(p)
    prediction = np.argmax(p, axis=1)
    credibility = p[np.arange(p.shape[0]), prediction]
    if p.shape[1] > 1:
        second = -np.partition(-p, 1, axis=1)[:, 1]
    else:
        second = np.zeros(p.shape[0])
    return prediction, 1.0 - second, credibility


def dknn_predict_batch(
        rssi: np.ndarray, index: NeighborIndex, calibration: CalibrationScores, state: ModelState
) -> DknnBatch:
    """Verdict columns for each row of ``rssi``."""
    hood = neighborhood(rssi, index, state)
    p = p_values(nonconformity_matrix(hood.labels, state.n_classes), calibration)
    prediction, confidence, credibility = summarize_p_values(p)
    return DknnBatch(prediction, confidence, credibility, p, hood.logits)


def dknn_predict(
        x: np.ndarray, index: NeighborIndex, calibration: CalibrationScores, state: ModelState
) -> DknnVerdict:
    """Full verdict for one RSSI vector, including the per-layer neighbor report."""
    hood = neighborhood(np.asarray(x)[None, :], index, state)
    p = p_values(nonconformity_matrix(hood.labels, state.n_classes), calibration)[0]
    prediction, confidence, credibility = (v[0] for v in summarize_p_values(p))
    report = [
        {
            "layer": layer_id,
            "neighbor_ids": hood.ids[0, pos],
            "labels": hood.labels[0, pos],
            "similarities": hood.similarities[0, pos],
            "zero_activation": bool(hood.zero_query[0, pos]),
        }
        for pos, layer_id in enumerate(index.layer_ids)
    ]
    return DknnVerdict(int(prediction), float(confidence), float(credibility), p, to_builtin(report))


def dknn_rank(p: np.ndarray, logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k beams by p-value, ties broken by logit and then by index."""
    p = np.atleast_2d(p)
    logits = np.atleast_2d(logits)
    if not 1 <= k <= p.shape[1]:
        raise InvalidArgumentError(f"k must lie in [1, {p.shape[1]}], got {k}")
    index = np.broadcast_to(np.arange(p.shape[1]), p.shape)
    order = np.lexsort((index, -logits, -p), axis=1)
    return order[:, :k]


def lsh_recall(
        lsh_index: NeighborIndex, exact_index: NeighborIndex, rssi: np.ndarray, state: ModelState
) -> dict[str, Any]:
    """Fraction of exact neighbors the LSH index also returns, per layer and overall."""
    lsh_hood = neighborhood(rssi, lsh_index, state)
    exact_hood = neighborhood(rssi, exact_index, state)
    per_layer = []
    for pos in range(exact_index.n_layers):
        hits = [
            len(np.intersect1d(a, b)) / exact_index.k
            for a, b in zip(lsh_hood.ids[:, pos], exact_hood.ids[:, pos])
        ]
        per_layer.append(float(np.mean(hits)))
    report = {"recall": float(np.mean(per_layer)), "per_layer": per_layer, "queries": int(len(rssi))}
    logger.info("LSH recall %.3f over %d queries", report["recall"], report["queries"])
    return report


def save_index(index: NeighborIndex, path: str | Path) -> Path:
    """Write the index as a BAI1 container: float32 layer blobs then u16 labels."""
    header = {
        "version": INDEX_VERSION,
        "n": len(index),
        "k": index.k,
        "layer_ids": index.layer_ids,
        "dims": [int(layer.shape[1]) for layer in index.layers],
        "backend": index.backend.value,
        "settings": {
            "lsh_tables": index.settings.lsh_tables,
            "lsh_hashes_per_table": index.settings.lsh_hashes_per_table,
            "lsh_projection_dim": index.settings.lsh_projection_dim,
            "lsh_buckets_per_table": index.settings.lsh_buckets_per_table,
            "rerank": index.settings.rerank,
        },
        "seed": index.seed,
        **index.meta,
    }
    body = b"".join(layer.astype("<f4").tobytes() for layer in index.layers)
    body += index.labels.astype("<u2").tobytes()
    path = write_container(path, INDEX_MAGIC, header, body)
    logger.info("Wrote neighbor index %s", path)
    return path


def load_index(path: str | Path) -> NeighborIndex:
    """Read an index written by :func:`save_index`; LSH tables are rebuilt from the seed."""

    def body_size(header: dict[str, Any]) -> int:
        try:
            n = int(header["n"])
            return sum(4 * n * int(d) for d in header["dims"]) + 2 * n
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: index header is incomplete") from e

    header, body = read_container(path, INDEX_MAGIC, INDEX_VERSION, body_size)
    n = int(header["n"])
    layers, offset = [], 0
    for dim in header["dims"]:
        layers.append(np.frombuffer(body, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim))
        offset += 4 * n * dim
    labels = np.frombuffer(body, dtype="<u2", count=n, offset=offset).astype(np.int64)
    known = {"version", "n", "k", "layer_ids", "dims", "backend", "settings", "seed"}
    return NeighborIndex(
        layers=layers,
        labels=labels,
        k=int(header["k"]),
        layer_ids=list(header["layer_ids"]),
        backend=DknnBackend(header["backend"]),
        settings=DknnConfig(k=int(header["k"]), backend=DknnBackend(header["backend"]), **header["settings"]),
        seed=int(header["seed"]),
        meta={key: value for key, value in header.items() if key not in known},
    )


def save_calibration(calibration: CalibrationScores, path: str | Path) -> Path:
    """Write calibration scores as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "version": CALIBRATION_VERSION,
        "k": calibration.k,
        "n_layers": calibration.n_layers,
        "scores": calibration.scores.tolist(),
        **calibration.meta,
    }
    path.write_text(canonical_json(record), encoding="utf-8")
    logger.info("Wrote %d calibration scores to %s", len(calibration), path)
    return path


def load_calibration(path: str | Path) -> CalibrationScores:
    """Read calibration scores written by :func:`save_calibration`."""
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"calibration {path} is missing; run calibrate first") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: calibration file is not valid JSON") from e
    if record.get("version") != CALIBRATION_VERSION:
        raise VersionMismatchError(f"{path}: calibration version {record.get('version')} is not supported")
    meta = {key: value for key, value in record.items() if key not in ("version", "k", "n_layers", "scores")}
    return CalibrationScores(
        scores=np.asarray(record["scores"], dtype=np.int64),
        k=int(record["k"]),
        n_layers=int(record["n_layers"]),
        meta=meta,
    )
