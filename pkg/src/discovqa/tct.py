"""Temporal content transformer.

Sampled STDE tokens are reduced to width C, passed through a residual
four-layer encoder, then a two-layer decoder whose query is the average
pre-encoding token. The last decoder layer's attention row over the frames,
applied to its values and added back onto the encoded tokens, feeds a small
MLP that emits one attention weight per sampled frame.

There is no positional encoding, and every reduction over the token axis is
summed in sorted order, so permuting the sampled tokens permutes the
outputs exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ENCODER_DEPTH = 4
DECODER_DEPTH = 2


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class TsfSelection:
    s0_effective: int
    indices: tuple[int, ...]


def segment_bounds(n_frames: int, s0: int) -> list[tuple[int, int]]:
    s = min(s0, n_frames)
    return [(j * n_frames // s, (j + 1) * n_frames // s) for j in range(s)]


def tsf_sample(n_frames: int, s0: int, rng: np.random.Generator) -> TsfSelection:
    """One uniformly drawn frame from each of ``min(s0, N)`` half-open segments."""
    if n_frames < 1 or s0 < 1:
        raise ValueError(f"need n_frames >= 1 and s0 >= 1, got {n_frames}, {s0}")
    bounds = segment_bounds(n_frames, s0)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    idx = lo + np.floor(rng.random(len(bounds)) * (hi - lo)).astype(np.int64)
    return TsfSelection(len(bounds), tuple(int(i) for i in idx))


# ---------------------------------------------------------------- parameters

class _ParamGroup:
    """Mixin: iterate the tensors of a parameter dataclass by field name."""

    def named(self, prefix: str = ""):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                yield prefix + f.name, v
            elif isinstance(v, _ParamGroup):
                yield from v.named(f"{prefix}{f.name}.")
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    yield from item.named(f"{prefix}{f.name}.{i}.")


@dataclass
class AttentionLayerParams(_ParamGroup):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class CrossProjection(_ParamGroup):
    """Query/key/value projections of the last decoder layer."""
    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class Linear(_ParamGroup):
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass
class TctParams(_ParamGroup):
    reduce: Linear
    encoder: list
    decoder: AttentionLayerParams
    decoder_out: CrossProjection
    l3: Linear
    l4: Linear

    @property
    def width(self) -> int:
        return self.reduce.weight.shape[1]


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape))


def init_linear(rng, fan_in: int, fan_out: int) -> Linear:
    return Linear(_uniform(rng, fan_in, (fan_in, fan_out)), Tensor(np.zeros(fan_out)))


def init_attention_layer(rng, c: int, ff: int) -> AttentionLayerParams:
    return AttentionLayerParams(
        wq=_uniform(rng, c, (c, c)), wk=_uniform(rng, c, (c, c)),
        wv=_uniform(rng, c, (c, c)), wo=_uniform(rng, c, (c, c)),
        ff1_w=_uniform(rng, c, (c, ff)), ff1_b=Tensor(np.zeros(ff)),
        ff2_w=_uniform(rng, ff, (ff, c)), ff2_b=Tensor(np.zeros(c)),
        ln1_g=Tensor(np.ones(c)), ln1_b=Tensor(np.zeros(c)),
        ln2_g=Tensor(np.ones(c)), ln2_b=Tensor(np.zeros(c)),
    )


def init_tct(rng: np.random.Generator, c_in: int, c: int = 256, hidden: int = 64,
             ff: int | None = None) -> TctParams:
    ff = 4 * c if ff is None else ff
    return TctParams(
        reduce=init_linear(rng, c_in, c),
        encoder=[init_attention_layer(rng, c, ff) for _ in range(ENCODER_DEPTH)],
        decoder=init_attention_layer(rng, c, ff),
        decoder_out=CrossProjection(_uniform(rng, c, (c, c)), _uniform(rng, c, (c, c)),
                                    _uniform(rng, c, (c, c))),
        l3=init_linear(rng, c, hidden),
        l4=init_linear(rng, hidden, 1),
    )


# ---------------------------------------------------------------- layers

def channel_reduce(tokens: Tensor, p: Linear) -> Tensor:
    if tokens.data.ndim != 2 or tokens.shape[1] != p.weight.shape[0]:
        raise ShapeError(f"tokens {tokens.shape} do not match reduction input {p.weight.shape}")
    return p(tokens)


def self_attention(t: Tensor, p: AttentionLayerParams, heads: int = 4) -> tuple[list[Tensor], Tensor]:
    """Multi-head scaled dot-product self-attention.

    Returns the per-head attention matrices (each k x k, rows summing to one)
    and the projected output. Each head uses a C/heads slice of the
    projections and scales its logits by the square root of that width.
    """
    c = t.shape[1]
    if c % heads:
        raise ShapeError(f"width {c} is not divisible by {heads} heads")
    dh = c // heads
    q = T.matmul(t, p.wq)
    k = T.matmul(t, p.wk)
    v = T.matmul(t, p.wv)
    maps, outs = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = T.columns(q, lo, hi), T.columns(k, lo, hi), T.columns(v, lo, hi)
        m = T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh)))
        maps.append(m)
        outs.append(T.token_matmul(m, vh))
    joined = outs[0] if heads == 1 else T.concat(outs, axis=1)
    return maps, T.matmul(joined, p.wo)


def feed_forward(x: Tensor, p: AttentionLayerParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)


def encoder_layer(x: Tensor, p: AttentionLayerParams, heads: int = 4) -> tuple[Tensor, list[Tensor]]:
    """Post-norm residual block: attention sublayer then feed-forward sublayer."""
    maps, att = self_attention(x, p, heads)
    x = T.layer_norm(T.add(x, att), p.ln1_g, p.ln1_b)
    x = T.layer_norm(T.add(x, feed_forward(x, p)), p.ln2_g, p.ln2_b)
    return x, maps


def encoder_phi(t_pe: Tensor, layers: list, heads: int = 4) -> tuple[Tensor, list[list[Tensor]]]:
    """The four stacked layers, without the long-range residual."""
    if len(layers) != ENCODER_DEPTH:
        raise ValueError(f"encoder needs exactly {ENCODER_DEPTH} layers, got {len(layers)}")
    x, all_maps = t_pe, []
    for p in layers:
        x, maps = encoder_layer(x, p, heads)
        all_maps.append(maps)
    return x, all_maps


def encoder_forward(t_pe: Tensor, layers: list, heads: int = 4) -> Tensor:
    """``T_en = phi(T_pe) + T_pe``."""
    if t_pe.data.ndim != 2 or t_pe.shape[1] != layers[0].wq.shape[0]:
        raise ShapeError(f"pre-encoding tokens {t_pe.shape} do not match encoder width {layers[0].wq.shape[0]}")
    phi, _ = encoder_phi(t_pe, layers, heads)
    return T.add(phi, t_pe)


def cross_attention(query: Tensor, keys_from: Tensor, wq: Tensor, wk: Tensor, wv: Tensor):
    """Single-query attention over tokens: returns (M_QK as 1 x k, V_de as k x C)."""
    c = keys_from.shape[1]
    q = T.matmul(query, wq)
    k = T.matmul(keys_from, wk)
    v = T.matmul(keys_from, wv)
    m = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c)))
    return m, v


@dataclass
class DecoderResult:
    weights: Tensor        # k x 1
    m_qk: Tensor | None    # 1 x k, None for the pure-encoder variant
    t_out: Tensor


def average_token(t_pe: Tensor, zero_token_target: bool = False) -> Tensor:
    if zero_token_target:
        return Tensor(np.zeros((1, t_pe.shape[1])))
    return T.mean(t_pe, axis=0, keepdims=True)


def decoder_forward(t_en: Tensor, t_pe: Tensor, p: TctParams,
                    zero_token_target: bool = False) -> DecoderResult:
    """Two-layer decoder and attention-weight head.

    Layer one refines the query token (cross-attention, then feed-forward,
    each with residual and layer norm). Layer two produces M_QK; the vector
    ``M_QK V_de`` is added to every row of ``T_en`` before ``l3 -> gelu -> l4``.
    """
    if t_en.shape != t_pe.shape:
        raise ShapeError(f"encoded {t_en.shape} and pre-encoding {t_pe.shape} tokens differ")
    d = p.decoder
    query = average_token(t_pe, zero_token_target)
    m1, v1 = cross_attention(query, t_en, d.wq, d.wk, d.wv)
    att = T.matmul(T.token_matmul(m1, v1), d.wo)
    query = T.layer_norm(T.add(query, att), d.ln1_g, d.ln1_b)
    query = T.layer_norm(T.add(query, feed_forward(query, d)), d.ln2_g, d.ln2_b)

    last = p.decoder_out
    m_qk, v_de = cross_attention(query, t_en, last.wq, last.wk, last.wv)
    t_out = T.add_row(t_en, T.token_matmul(m_qk, v_de))
    w = p.l4(T.gelu(p.l3(t_out)))
    return DecoderResult(w, m_qk, t_out)


@dataclass
class TctOutput:
    weights: Tensor          # S0' x 1, aligned with selection.indices
    m_qk: Tensor | None      # 1 x S0'
    selection: TsfSelection
    t_en: Tensor


def tct_on_selection(stde: Tensor, p: TctParams, selection: TsfSelection, heads: int = 4,
                     pure_encoder: bool = False, zero_token_target: bool = False) -> TctOutput:
    sampled = T.take(stde, selection.indices)
    t_pe = channel_reduce(sampled, p.reduce)
    t_en = encoder_forward(t_pe, p.encoder, heads)
    if pure_encoder:
        w = p.l4(T.gelu(p.l3(t_en)))
        return TctOutput(w, None, selection, t_en)
    res = decoder_forward(t_en, t_pe, p, zero_token_target)
    return TctOutput(res.weights, res.m_qk, selection, t_en)


def tct_forward(stde: Tensor, p: TctParams, s0: int, rng: np.random.Generator, heads: int = 4,
                pure_encoder: bool = False, zero_token_target: bool = False) -> TctOutput:
    """Sample, reduce, encode, decode; weights line up with ``selection.indices``."""
    selection = tsf_sample(stde.shape[0], s0, rng)
    return tct_on_selection(stde, p, selection, heads, pure_encoder, zero_token_target)
