"""AdamW training with validation-peak selection, checkpoints and evaluation.

Checkpoint layout (u32 little-endian integers)::

    b"DCVC" | version=1 | len | UTF-8 key=value block
    | count | per tensor: len | name | ndim | dims... | float32 data
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig, parse_config_text
from .features import ManifestEntry, read_feature_file
from .metrics import DegenerateInputError, MetricReport, metric_report, srocc
from .model import DisCoVQA
from .quality import (DegenerateStatisticsError, QualityPrediction, RemapStats, compute_remap_stats,
                      mae_loss, multi_sample_predict, remap, remap_batch)
from .tensor import Tensor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"DCVC"
CKPT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _rng(*words: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(words))))


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               config: TrainConfig) -> AdamWState:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    lr, b1, b2 = config.lr, config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


def clip_gradients(grads: list[np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            if g is not None:
                g *= factor
    return total


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    channels: tuple[int, ...]
    s_range: tuple[float, float]
    epoch: int = 0
    best_val_srocc: float = float("nan")
    # raw-prediction mean and std on the validation split at ``epoch``; lets a
    # single clip be remapped without a split around it
    q_stats: tuple[float, float] | None = None

    def remap_stats(self) -> RemapStats:
        if self.q_stats is None:
            raise CheckpointError("checkpoint carries no reference remap statistics")
        return RemapStats(self.q_stats[0], self.q_stats[1], *self.s_range)

    def build_model(self) -> DisCoVQA:
        model = DisCoVQA(self.config, self.channels)
        model.load_state_dict(self.params)
        model.set_trainable(False)
        return model

    def metadata_text(self) -> str:
        meta = {"meta.channels": ",".join(str(c) for c in self.channels),
                "meta.s_min": repr(self.s_range[0]), "meta.s_max": repr(self.s_range[1]),
                "meta.epoch": str(self.epoch), "meta.best_val_srocc": repr(self.best_val_srocc)}
        if self.q_stats is not None:
            meta["meta.q_mean"], meta["meta.q_std"] = repr(self.q_stats[0]), repr(self.q_stats[1])
        return self.config.to_text() + "".join(f"{k}={v}\n" for k, v in meta.items())


def _to_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = ckpt.metadata_text().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text,
             struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, text_len = read("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    if pos + text_len > len(buf):
        raise CheckpointError("checkpoint is truncated")
    text = buf[pos:pos + text_len].decode("utf-8")
    pos += text_len
    meta, cfg_lines = {}, []
    for line in text.splitlines():
        if line.startswith("meta."):
            k, v = line.split("=", 1)
            meta[k] = v
        else:
            cfg_lines.append(line)
    config = parse_config_text("\n".join(cfg_lines), source="checkpoint")
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (nlen,) = read("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I") if ndim else ()
        n = math.prod(shape)
        if pos + 4 * n > len(buf):
            raise CheckpointError("checkpoint is truncated")
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
    return Checkpoint(params, config, tuple(int(c) for c in meta["meta.channels"].split(",")),
                      (float(meta["meta.s_min"]), float(meta["meta.s_max"])),
                      int(meta["meta.epoch"]), float(meta["meta.best_val_srocc"]),
                      (float(meta["meta.q_mean"]), float(meta["meta.q_std"])) if "meta.q_mean" in meta else None)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- data

def load_tokens(model: DisCoVQA, entries: Sequence[ManifestEntry]) -> list[Tensor]:
    out = []
    for e in entries:
        if not Path(e.feature_path).exists():
            raise FileNotFoundError(f"feature file for {e.video_id} not found: {e.feature_path}")
        out.append(model.tokens(read_feature_file(e.feature_path)))
    return out


def _split(entries: Sequence[ManifestEntry], name: str) -> list[ManifestEntry]:
    return [e for e in entries if e.split == name]


# ---------------------------------------------------------------- evaluation

def predict_split(model: DisCoVQA, tokens: Sequence[Tensor], s_m: int, seed: int) -> list[QualityPrediction]:
    """Raw multi-sample predictions; clip ``i`` draws from its own seeded stream."""
    return [multi_sample_predict(model, tok, s_m, _rng(seed, 3, i)) for i, tok in enumerate(tokens)]


def remap_predictions(preds: list[QualityPrediction], s_range, literal_sign: bool = False) -> RemapStats:
    """Split-level remap; fills ``q_mapped`` in place and returns the statistics used."""
    raws = [p.q_raw for p in preds]
    try:
        stats = compute_remap_stats(raws, s_range=s_range)
    except DegenerateStatisticsError:
        stats = RemapStats(float(np.mean(raws)), 1.0, *s_range)
    for p in preds:
        p.q_mapped = remap(p.q_raw, stats, literal_sign)
    return stats


def _srocc_or_nan(pred, target) -> float:
    try:
        return srocc(pred, target)
    except DegenerateInputError:
        return float("nan")


def evaluate_tokens(model: DisCoVQA, tokens, mos, s_range, s_m: int, seed: int):
    preds = predict_split(model, tokens, s_m, seed)
    remap_predictions(preds, s_range, model.config.literal_eq15_sign)
    return metric_report([p.q_mapped for p in preds], mos), preds


def evaluate(checkpoint: Checkpoint, entries: Sequence[ManifestEntry], s_m: int = 8, seed: int = 0,
             tokens: list[Tensor] | None = None) -> tuple[MetricReport, list[QualityPrediction]]:
    """Multi-sample prediction per clip, split-level remap, then metrics."""
    if not entries:
        raise ValueError("evaluation split is empty")
    model = checkpoint.build_model()
    tokens = load_tokens(model, entries) if tokens is None else tokens
    return evaluate_tokens(model, tokens, [e.mos for e in entries], checkpoint.s_range, s_m, seed)


def tsf_stability_report(checkpoint: Checkpoint, entries: Sequence[ManifestEntry], s_m_list=(1, 2, 4, 8, 16),
                         repeats: int = 20, seed: int = 0, tokens: list[Tensor] | None = None) -> dict[int, float]:
    """Mean per-video std of predictions over ``repeats`` seeds, per ``s_m``.

    Predictions go through one fixed remap (statistics from a reference run at
    the largest ``s_m``) and the std is divided by the score range.
    """
    if not entries:
        raise ValueError("split is empty")
    model = checkpoint.build_model()
    tokens = load_tokens(model, entries) if tokens is None else tokens
    ref = predict_split(model, tokens, max(s_m_list), seed)
    stats = remap_predictions(ref, checkpoint.s_range, model.config.literal_eq15_sign)
    span = checkpoint.s_range[1] - checkpoint.s_range[0]
    # d over all frames does not depend on the sampling; compute it once per clip
    d_all = [model.frame_qualities(tok) for tok in tokens]
    report = {}
    for s_m in s_m_list:
        per_video = np.empty((repeats, len(tokens)))
        for r in range(repeats):
            for i, tok in enumerate(tokens):
                rng = _rng(seed, 4, s_m, r, i)
                raws = [model.forward_tokens(tok, rng, d=d_all[i]).q.item() for _ in range(s_m)]
                per_video[r, i] = remap(float(np.mean(raws)), stats, model.config.literal_eq15_sign)
        report[s_m] = float(np.mean(per_video.std(axis=0)) / span)
    return report


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    init_val_srocc: float


def train(config: TrainConfig, entries: Sequence[ManifestEntry], log_path=None,
          token_cache: dict | None = None) -> TrainResult:
    """Train on the ``train`` split, keep the checkpoint with the best validation SROCC.

    ``token_cache`` maps video ids to precomputed STDE tokens; it is filled
    on first use so several runs over one corpus read each file once.
    """
    config.validate()
    train_set, val_set = _split(entries, "train"), _split(entries, "val")
    if not train_set or not val_set:
        raise ValueError("manifest needs non-empty train and val splits")
    channels = tuple(read_feature_file(train_set[0].feature_path).channels)
    model = DisCoVQA(config, channels)

    def tokens_for(subset):
        if token_cache is None:
            return load_tokens(model, subset)
        key = (config.multilevel, config.temporal_diff)
        out = []
        for e in subset:
            if (key, e.video_id) not in token_cache:
                token_cache[(key, e.video_id)] = load_tokens(model, [e])[0]
            out.append(token_cache[(key, e.video_id)])
        return out

    train_tok, val_tok = tokens_for(train_set), tokens_for(val_set)
    train_mos = np.array([e.mos for e in train_set])
    val_mos = [e.mos for e in val_set]
    s_range = (float(train_mos.min()), float(train_mos.max()))
    if not s_range[1] > s_range[0]:
        raise ValueError("training labels are constant; cannot remap")

    params = model.parameters()
    state = AdamWState()
    shuffle_rng, tsf_rng = _rng(config.seed, 1), _rng(config.seed, 2)

    # the same draws every epoch, so epochs are compared on equal footing
    val_seed = config.seed + 1_000_003

    def validate() -> tuple[float, tuple[float, float]]:
        model.set_trainable(False)
        report_preds = predict_split(model, val_tok, 1, val_seed)
        stats = remap_predictions(report_preds, s_range, config.literal_eq15_sign)
        return _srocc_or_nan([p.q_mapped for p in report_preds], val_mos), (stats.q_mean, stats.q_std)

    init_val, q_stats = validate()
    best = Checkpoint(_to_f32(model.state_dict()), config, channels, s_range, 0, init_val, q_stats)
    best_score = init_val if math.isfinite(init_val) else -math.inf
    stale = 0
    log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            model.set_trainable(True)
            order = shuffle_rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                outs = [model.forward_tokens(train_tok[i], tsf_rng).q for i in batch]
                raws = [o.item() for o in outs]
                q_hat = remap_batch(T.stack(outs), s_range, config.literal_eq15_sign)
                loss = mae_loss(q_hat, train_mos[batch])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                         f"raw q range [{min(raws)}, {max(raws)}]")
                T.backward(loss)
                grads = [p.grad for p in params]
                clip_gradients(grads, config.clip_norm)
                adamw_step(params, grads, state, config)
                for p in params:
                    p.grad = None
                losses.append(value)
            val, q_stats = validate()
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_srocc": val}
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            logger.info("epoch %d loss %.4f val srocc %.4f", epoch, entry["train_loss"], val)
            if math.isfinite(val) and val > best_score:
                best_score = val
                best = Checkpoint(_to_f32(model.state_dict()), config, channels, s_range, epoch, val, q_stats)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.set_trainable(False)
    return TrainResult(best, log, init_val)
