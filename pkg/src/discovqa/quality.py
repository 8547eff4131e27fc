"""Quality aggregation, logistic remapping, MAE loss and multi-sample prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class DegenerateStatisticsError(ValueError):
    pass


@dataclass(frozen=True)
class RemapStats:
    q_mean: float
    q_std: float
    s_min: float
    s_max: float

    def __post_init__(self):
        if not self.q_std > 0:
            raise DegenerateStatisticsError(f"q_std must be positive, got {self.q_std}")
        if not self.s_max > self.s_min:
            raise DegenerateStatisticsError(f"s_max ({self.s_max}) must exceed s_min ({self.s_min})")


@dataclass
class QualityPrediction:
    q_raw: float
    q_mapped: float
    per_sample_raw: list[float] = field(default_factory=list)
    selections: list = field(default_factory=list)


def aggregate_quality(d: Tensor, w: Tensor) -> Tensor:
    """``sum_i d_i (1 + w_i) / k`` over the k sampled frames."""
    if d.shape != w.shape:
        raise ShapeError(f"d {d.shape} and w {w.shape} must have the same shape")
    if d.size < 1:
        raise ShapeError("need at least one frame")
    return T.scale(T.sum_(T.mul(d, T.shift(w, 1.0))), 1.0 / d.size)


def remap(q, stats: RemapStats, literal_sign: bool = False):
    """Logistic map of raw quality into ``[s_min, s_max]``.

    The default orientation is increasing in ``q``. ``literal_sign=True``
    uses ``e^{+(q - mean)/std}`` in the denominator, which is decreasing.
    Accepts a float or a Tensor (differentiable path).
    """
    span = stats.s_max - stats.s_min
    sign = 1.0 if literal_sign else -1.0
    if isinstance(q, Tensor):
        z = T.scale(T.shift(q, -stats.q_mean), sign / stats.q_std)
        # span / (1 + e^z) == span * sigmoid(-z)
        return T.shift(T.scale(T.sigmoid(T.scale(z, -1.0)), span), stats.s_min)
    z = sign * (float(q) - stats.q_mean) / stats.q_std
    if z > 0:
        e = math.exp(-z) if z < 700 else 0.0
        return span * e / (1.0 + e) + stats.s_min
    return span / (1.0 + math.exp(z)) + stats.s_min


def remap_batch(q: Tensor, s_range: tuple[float, float], literal_sign: bool = False) -> Tensor:
    """Remap a vector of raw qualities with its own mean and population std.

    The statistics stay on the tape, so shifting or scaling every raw
    prediction of the batch together has no effect on the loss. Falls back
    to unit std when the batch is degenerate (one clip or constant values).
    """
    s_min, s_max = s_range
    n = q.size
    mu = T.mean(q)
    centred = T.sub(q, T.expand(mu, q.shape))
    var = T.mean(T.mul(centred, centred))
    if n < 2 or not var.item() > 0:
        std = Tensor(np.ones(q.shape))
    else:
        std = T.expand(T.sqrt(var), q.shape)
    z = T.div(centred, std)
    if literal_sign:
        z = T.scale(z, -1.0)
    return T.shift(T.scale(T.sigmoid(z), s_max - s_min), s_min)


def compute_remap_stats(q_values, s_values=None, s_range: tuple[float, float] | None = None) -> RemapStats:
    """Mean and population std of ``q_values``; label range from ``s_values`` or ``s_range``."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size < 2:
        raise DegenerateStatisticsError("need at least two raw predictions")
    mu = q.mean()
    std = math.sqrt(((q - mu) ** 2).mean())
    if std == 0.0:
        raise DegenerateStatisticsError("raw predictions are constant")
    if s_range is None:
        s = np.asarray(s_values, dtype=np.float64)
        s_range = (float(s.min()), float(s.max()))
    return RemapStats(float(mu), std, float(s_range[0]), float(s_range[1]))


def mae_loss(q_hat: Tensor, s) -> Tensor:
    """Mean absolute error over the batch."""
    s = T.as_tensor(s)
    if q_hat.shape != s.shape:
        raise ShapeError(f"prediction {q_hat.shape} and label {s.shape} shapes differ")
    return T.mean(T.abs_(T.sub(q_hat, s)))


def multi_sample_predict(model, clip, s_m: int, rng: np.random.Generator) -> QualityPrediction:
    """Average the raw quality over ``s_m`` independent temporal samplings.

    ``clip`` is a feature clip or its precomputed STDE tokens.

    ``q_mapped`` is filled with ``nan``; the split-level remap happens once
    all clips of a split have raw predictions.
    """
    if s_m < 1:
        raise ValueError("s_m must be >= 1")
    stde = clip if isinstance(clip, Tensor) else model.tokens(clip)
    d = model.frame_qualities(stde)
    raws, selections = [], []
    for _ in range(s_m):
        out = model.forward_tokens(stde, rng, d=d)
        raws.append(out.q.item())
        selections.append(out.selection)
    return QualityPrediction(float(np.mean(raws)), float("nan"), raws, selections)
