"""Correlation metrics between predicted and subjective scores.

SROCC uses average ranks for ties; KROCC is tau-b from explicit pair
counts. Degenerate (constant) inputs raise instead of returning 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    srocc: float
    plcc: float
    krocc: float
    n: int

    def as_dict(self) -> dict:
        return {"srocc": self.srocc, "plcc": self.plcc, "krocc": self.krocc, "n": self.n}


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateInputError("need at least two samples")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("constant input has no linear correlation")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def srocc(x, y) -> float:
    x, y = _pair(x, y)
    return plcc(rankdata(x, method="average"), rankdata(y, method="average"))


def krocc(x, y) -> float:
    """Kendall tau-b by O(n^2) pair counting."""
    x, y = _pair(x, y)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    sx, sy = dx[iu], dy[iu]
    s = float(np.sum(sx * sy))
    nx = float(np.count_nonzero(sx))
    ny = float(np.count_nonzero(sy))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("all pairs tied in one argument")
    return max(-1.0, min(1.0, s / math.sqrt(nx * ny)))


def metric_report(pred, target) -> MetricReport:
    pred, target = _pair(pred, target)
    return MetricReport(srocc(pred, target), plcc(pred, target), krocc(pred, target), int(pred.size))
