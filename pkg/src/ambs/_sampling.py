"""Vectorised categorical sampling over the rows of a stochastic matrix."""

from __future__ import annotations

import numpy as np


class RowSampler:
    """Inverse-CDF sampler for ``P[row]`` with many rows drawn at once.

    Rows with small support are stored padded (index, cdf) pairs so that a
    draw costs O(max support) instead of O(n_columns).
    """

    def __init__(self, matrix: np.ndarray, sparse_limit: int = 16):
        matrix = np.asarray(matrix, dtype=float)
        self.shape = matrix.shape
        flat = matrix.reshape(-1, matrix.shape[-1])
        support = flat > 0.0
        width = int(support.sum(axis=1).max()) if flat.size else 0
        if 0 < width <= sparse_limit and width < flat.shape[1]:
            order = np.argsort(~support, axis=1, kind="stable")[:, :width]
            probs = np.take_along_axis(flat, order, axis=1)
            self._index = order
        else:
            probs = flat
            self._index = None
        cdf = np.cumsum(probs, axis=1)
        # normalising by the last entry makes trailing zero-mass cells exactly 1.0
        cdf /= cdf[:, -1:]
        self._cdf = cdf

    def sample(self, rows, rng: np.random.Generator) -> np.ndarray:
        """Draw one column index per entry of ``rows`` (flat row indices)."""
        rows = np.asarray(rows)
        u = rng.random(rows.shape)
        pos = (u[..., None] > self._cdf[rows]).sum(axis=-1)
        if self._index is None:
            return pos
        return self._index[rows, pos]

    def flat_row(self, *index) -> np.ndarray:
        """Flat row number of a multi-index into the leading dimensions."""
        return np.ravel_multi_index(index, self.shape[:-1])
