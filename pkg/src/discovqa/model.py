"""The full quality model: distortion head, temporal content transformer and
aggregation, wired together under one set of named parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .features import FeatureClip
from .quality import aggregate_quality
from .stde import DistortionHeadParams, frame_quality_head, stde_tokens, token_width
from .tct import TctParams, TsfSelection, init_linear, init_tct, tct_on_selection, tsf_sample
from .tensor import Tensor


@dataclass
class ForwardOutput:
    q: Tensor                  # scalar
    d: Tensor                  # k x 1, distortion qualities of the frames used
    w: Tensor | None           # k x 1 attention weights (None without the transformer)
    m_qk: Tensor | None        # 1 x k
    selection: TsfSelection | None


class DisCoVQA:
    """Parameters plus forward pass for one clip at a time.

    ``channels`` are the per-level widths of the ingested features; the
    config's toggles select the ablation variants.
    """

    def __init__(self, config: TrainConfig, channels, seed: int | None = None):
        self.config = config
        self.channels = tuple(int(c) for c in channels)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [config.seed if seed is None else seed, 7])))
        cfg = config
        width = token_width(self.channels, cfg.multilevel, cfg.temporal_diff)
        self.primary_width = width // 2 if cfg.temporal_diff else width
        head_in = self.primary_width if cfg.literal_eq5 else width
        l1 = init_linear(rng, head_in, cfg.hidden)
        l2 = init_linear(rng, cfg.hidden, 1)
        self.head = DistortionHeadParams(l1.weight, l1.bias, l2.weight, l2.bias)
        self.tct: TctParams | None = None
        if not cfg.no_tct:
            self.tct = init_tct(rng, width, cfg.width, cfg.hidden)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("head.l1.weight", self.head.l1_weight), ("head.l1.bias", self.head.l1_bias),
               ("head.l2.weight", self.head.l2_weight), ("head.l2.bias", self.head.l2_bias)]
        if self.tct is not None:
            out.extend(self.tct.named("tct."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    # ------------------------------------------------------------ forward

    def tokens(self, clip: FeatureClip) -> Tensor:
        if tuple(clip.channels) != self.channels:
            raise ValueError(f"clip channels {clip.channels} do not match model {self.channels}")
        return stde_tokens(clip, self.config.multilevel, self.config.temporal_diff)

    def frame_qualities(self, stde: Tensor) -> Tensor:
        """``d`` for every row of ``stde`` (N x 1)."""
        x = stde
        if self.config.literal_eq5 and x.shape[1] != self.primary_width:
            x = T.columns(x, 0, self.primary_width)
        return frame_quality_head(x, self.head)

    def forward_tokens(self, stde: Tensor, rng: np.random.Generator | None = None,
                       selection: TsfSelection | None = None, d: Tensor | None = None) -> ForwardOutput:
        """Raw quality of one clip.

        Pass either ``rng`` (a fresh temporal sampling is drawn) or a fixed
        ``selection``. ``d`` may carry precomputed qualities of all frames.
        """
        cfg = self.config
        if self.tct is None:
            d_all = self.frame_qualities(stde) if d is None else d
            q = aggregate_quality(d_all, Tensor(np.zeros(d_all.shape)))
            return ForwardOutput(q, d_all, None, None, None)
        if selection is None:
            selection = tsf_sample(stde.shape[0], cfg.s0, rng)
        if d is None:
            d_sel = self.frame_qualities(T.take(stde, selection.indices))
        else:
            d_sel = T.take(d, selection.indices)
        out = tct_on_selection(stde, self.tct, selection, cfg.heads,
                               cfg.pure_encoder, cfg.zero_token_target)
        q = aggregate_quality(d_sel, out.weights)
        return ForwardOutput(q, d_sel, out.weights, out.m_qk, selection)

    def forward(self, clip: FeatureClip, rng=None, selection=None) -> ForwardOutput:
        return self.forward_tokens(self.tokens(clip), rng, selection)
