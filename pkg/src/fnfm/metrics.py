"""Log-loss and ROC AUC."""

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError

CLAMP = 1e-15


@dataclass(frozen=True)
class MetricsReport:
    logloss: float
    auc: float | None
    n: int
    n_pos: int
    model: str = ""
    split: str = ""

    @property
    def n_neg(self) -> int:
        return self.n - self.n_pos

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in ("model", "split", "logloss", "auc", "n", "n_pos")})


def _pair(predictions, labels):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} predictions vs {y.size} labels")
    return p, y


def logloss(predictions, labels) -> float:
    """Mean binary cross-entropy with predictions clamped to ``[1e-15, 1 - 1e-15]``."""
    p, y = _pair(predictions, labels)
    if p.size == 0:
        raise ShapeError("logloss of an empty prediction vector")
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def auc(predictions, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2.

    Computed from midranks (Mann-Whitney U) in ``O(m log m)``.
    """
    p, y = _pair(predictions, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (got {n_pos} positives, {n_neg} negatives)")
    ranks = rankdata(p, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_predictions(predictions, labels, model="", split="") -> MetricsReport:
    p, y = _pair(predictions, labels)
    n_pos = int((y == 1).sum())
    score = auc(p, y) if 0 < n_pos < p.size else None
    return MetricsReport(logloss(p, y), score, int(p.size), n_pos, model, split)
