"""Row-sparse gradients for embedding and linear-weight tables."""

from dataclasses import dataclass

import numpy as np


def row_view(a: np.ndarray) -> np.ndarray:
    """View a table as ``[rows, width]``: ``[n]`` -> ``[n, 1]``, ``[n, f, D]`` -> ``[n*f, D]``."""
    if a.ndim == 1:
        return a.reshape(-1, 1)
    return a.reshape(-1, a.shape[-1])


@dataclass
class SparseRows:
    """Gradient restricted to ``rows`` of a table's :func:`row_view`."""

    rows: np.ndarray     # sorted unique row ids
    values: np.ndarray   # [len(rows), width]

    @classmethod
    def accumulate(cls, ids, vals) -> "SparseRows":
        ids = np.asarray(ids).reshape(-1)
        vals = np.asarray(vals, dtype=np.float64).reshape(ids.size, -1)
        rows, inverse = np.unique(ids, return_inverse=True)
        out = np.zeros((rows.size, vals.shape[1]))
        np.add.at(out, inverse, vals)
        return cls(rows, out)

    def to_dense(self, shape) -> np.ndarray:
        dense = np.zeros(shape)
        row_view(dense)[self.rows] = self.values
        return dense

    def scaled(self, c: float) -> "SparseRows":
        return SparseRows(self.rows, self.values * c)

    def __add__(self, other: "SparseRows") -> "SparseRows":
        return SparseRows.accumulate(np.concatenate([self.rows, other.rows]),
                                     np.concatenate([self.values, other.values]))


def densify(grad, shape) -> np.ndarray:
    return grad.to_dense(shape) if isinstance(grad, SparseRows) else np.asarray(grad)
