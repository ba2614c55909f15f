"""Empirical training metrics: degeneracy rates and representation separation."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from ..env import Episode, ToolQASpec, chunks


@dataclass(frozen=True)
class DegeneracyReport:
    duplication_ratio: float
    hallucination_rate: float
    format_error_rate: float
    valid_action_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def duplication_ratio(pieces) -> float:
    """Fraction of chunks whose content occurs more than once; 0 for no chunks."""
    if not pieces:
        return 0.0
    counts = Counter(pieces)
    return sum(1 for c in pieces if counts[c] > 1) / len(pieces)


def degeneracy_metrics(spec: ToolQASpec, episodes: list[Episode]) -> DegeneracyReport:
    if not episodes:
        raise ValueError("degeneracy metrics need at least one episode")
    dup = float(np.mean([duplication_ratio(chunks(spec, e.response)) for e in episodes]))
    fmt = float(np.mean([e.r_fmt for e in episodes]))
    hall = float(np.mean([e.hallucinated_arg for e in episodes]))
    return DegeneracyReport(dup, hall, 1.0 - fmt, fmt)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def separation_score(vectors, labels) -> tuple[float, float]:
    """(leave-one-out nearest-centroid accuracy, within-class minus between-class mean cosine)."""
    X = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("need one vector per label")
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("separation needs both labels present")

    s1, s0 = X[y].sum(axis=0), X[~y].sum(axis=0)
    correct = 0
    for i in range(len(X)):
        c1 = (s1 - X[i]) / (n1 - 1) if y[i] else s1 / n1
        c0 = (s0 - X[i]) / (n0 - 1) if not y[i] else s0 / n0
        # a class emptied by holding out its only member cannot be predicted
        d1 = np.sum((X[i] - c1) ** 2) if not (y[i] and n1 == 1) else np.inf
        d0 = np.sum((X[i] - c0) ** 2) if not (not y[i] and n0 == 1) else np.inf
        correct += int((d1 < d0) == y[i])
    acc = correct / len(X)

    U = _unit(X)
    C = U @ U.T
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(X), dtype=bool)
    within = C[same & off]
    between = C[~same]
    gap = (within.mean() if within.size else 1.0) - between.mean()
    return float(acc), float(gap)
