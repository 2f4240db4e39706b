"""Cross-polytope locality-sensitive hashing for cosine similarity.

Each hash projects a unit vector with a Gaussian matrix and reports the
signed coordinate of largest magnitude, one of ``2 * projection_dim``
codes. A table concatenates several hashes into one bucket key.
"""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np

from beam_align.utils import substream

logger = logging.getLogger(__name__)


class CrossPolytopeLSH:
    """Cross-polytope hash tables over a fixed set of unit vectors, queried several buckets deep."""

    def __init__(
            self,
            vectors: np.ndarray,
            *,
            n_tables: int,
            hashes_per_table: int,
            projection_dim: int,
            buckets_per_table: int,
            seed: int,
            layer: int = 0,
    ):
        """Hash ``vectors`` (n, d) into ``n_tables`` tables.

        Args:
            vectors: Unit-normalized rows to index.
            n_tables: Number of independent hash tables.
            hashes_per_table: Hashes concatenated into each bucket key.
            projection_dim: Rows of each Gaussian projection.
            buckets_per_table: Buckets visited per table at query time.
            seed: Run seed; projections come from the ``lsh`` substream.
            layer: Extra stream key so layers hash independently.
        """
        self.n_tables = n_tables
        self.hashes_per_table = hashes_per_table
        self.projection_dim = projection_dim
        self.buckets_per_table = buckets_per_table
        dim = vectors.shape[1]
        self.projections = [
            substream(seed, "lsh", layer, t).standard_normal((hashes_per_table, projection_dim, dim))
            for t in range(n_tables)
        ]
        self.tables: list[dict[int, np.ndarray]] = []
        for proj in self.projections:
            keys = self._keys(self._codes(proj, vectors)[..., 0])
            order = np.argsort(keys, kind="stable")
            unique, starts = np.unique(keys[order], return_index=True)
            groups = np.split(order, starts[1:])
            self.tables.append(dict(zip(unique.tolist(), groups)))
        logger.debug(
            "LSH layer %d: %d tables, mean %.1f buckets/table",
            layer,
            n_tables,
            np.mean([len(t) for t in self.tables]),
        )

    def _codes(self, proj: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Ranked codes per hash: shape (n, hashes, buckets_per_table), best first."""
        y = (vectors @ proj.reshape(-1, proj.shape[-1]).T).reshape(vectors.shape[0], *proj.shape[:2])
        ranked = np.argsort(-np.abs(y), axis=-1, kind="stable")[..., : self.buckets_per_table]
        signs = np.take_along_axis(y, ranked, axis=-1) < 0
        return ranked * 2 + signs

    def _keys(self, codes: np.ndarray) -> np.ndarray:
        base = 2 * self.projection_dim
        weights = base ** np.arange(self.hashes_per_table, dtype=np.int64)
        return codes.astype(np.int64) @ weights

    def _bucket_keys(self, ranked: np.ndarray) -> list[int]:
        """Bucket keys to visit: the best key, then single-hash substitutions by rank."""
        best = ranked[:, 0].copy()
        keys = [int(self._keys(best))]
        for rank in range(1, ranked.shape[1]):
            for h in range(self.hashes_per_table):
                if len(keys) >= self.buckets_per_table:
                    return keys
                alt = best.copy()
                alt[h] = ranked[h, rank]
                keys.append(int(self._keys(alt)))
        return keys[: self.buckets_per_table]

    def candidates(self, query: np.ndarray) -> Counter[int]:
        """Return candidate ids with their bucket collision counts."""
        hits: Counter[int] = Counter()
        for proj, table in zip(self.projections, self.tables):
            ranked = self._codes(proj, query[None, :])[0]
            for key in self._bucket_keys(ranked):
                bucket = table.get(key)
                if bucket is not None:
                    hits.update(bucket.tolist())
        return hits
