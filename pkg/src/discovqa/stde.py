"""Distortion-side token processing: pooling, level concatenation,
temporal differences and the per-frame quality MLP.

All functions take and return tensors so the whole path can be
differentiated (the gradient checker runs through it); during training the
inputs are plain data and no graph is recorded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import FeatureClip
from .tensor import ShapeError, Tensor


@dataclass
class PrimaryTokens:
    tokens: Tensor                      # N x C_T
    level_offsets: list[tuple[int, int]]


def global_average_pool(level) -> Tensor:
    """Mean over spatial positions; pooled (N x c) levels pass through unchanged."""
    level = T.as_tensor(level)
    if level.data.ndim == 2:
        return level
    if level.data.ndim != 4:
        raise ShapeError(f"expected N x c or N x h x w x c, got {level.shape}")
    n, h, w, c = level.shape
    return T.mean(T.reshape(level, (n, h * w, c)), axis=1)


def concat_multilevel(pooled: list[Tensor], multilevel: bool = True) -> PrimaryTokens:
    """Concatenate per-level tokens in level order; ``multilevel=False`` keeps the last level only."""
    if not multilevel:
        pooled = pooled[-1:]
    n = pooled[0].shape[0]
    offsets, start = [], 0
    for p in pooled:
        if p.shape[0] != n:
            raise ShapeError(f"levels disagree on frame count: {n} vs {p.shape[0]}")
        offsets.append((start, start + p.shape[1]))
        start += p.shape[1]
    tokens = pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=1)
    return PrimaryTokens(tokens, offsets)


def temporal_difference(primary: PrimaryTokens | Tensor) -> Tensor:
    """Rows ``T_i (+) (T_i - T_{i+1})``; the last row gets a zero difference half."""
    t = primary.tokens if isinstance(primary, PrimaryTokens) else T.as_tensor(primary)
    n, c = t.shape
    if n == 1:
        return T.concat([t, Tensor(np.zeros((1, c)))], axis=1)
    head = T.take(t, range(n - 1))
    tail = T.take(t, range(1, n))
    diff = T.concat([T.sub(head, tail), Tensor(np.zeros((1, c)))], axis=0)
    return T.concat([t, diff], axis=1)


def stde_tokens(levels, multilevel: bool = True, temporal_diff: bool = True) -> Tensor:
    """Tokens fed to both the quality head and the transformer.

    ``levels`` is a :class:`FeatureClip` or a list of level tensors. With
    ``temporal_diff=False`` the primary tokens are returned unchanged.
    """
    if isinstance(levels, FeatureClip):
        levels = [Tensor(lv) for lv in levels.levels]
    primary = concat_multilevel([global_average_pool(lv) for lv in levels], multilevel)
    return temporal_difference(primary) if temporal_diff else primary.tokens


def token_width(channels, multilevel: bool = True, temporal_diff: bool = True) -> int:
    c = sum(channels) if multilevel else channels[-1]
    return 2 * c if temporal_diff else c


@dataclass
class DistortionHeadParams:
    l1_weight: Tensor
    l1_bias: Tensor
    l2_weight: Tensor
    l2_bias: Tensor


def frame_quality_head(tokens: Tensor, p: DistortionHeadParams) -> Tensor:
    """Per-frame distortion quality ``d = l2(gelu(l1(tokens)))``, returned as N x 1."""
    if tokens.data.ndim != 2 or tokens.shape[1] != p.l1_weight.shape[0]:
        raise ShapeError(f"token shape {tokens.shape} does not fit head input width {p.l1_weight.shape[0]}")
    hidden = T.gelu(T.linear(tokens, p.l1_weight, p.l1_bias))
    return T.linear(hidden, p.l2_weight, p.l2_bias)
