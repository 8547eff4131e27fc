"""Feature files, manifests, the synthetic clip generator and dataset splits.

Feature file layout (all integers u32 little-endian unless noted)::

    b"DCVF" | version=1 | N | L
    per level: u8 kind (0 pooled, 1 spatial), dims
               pooled: c            -> N*c float32
               spatial: h, w, c     -> N*h*w*c float32

Random streams come from numpy's PCG64 seeded through ``SeedSequence``,
which is a documented, splittable 64-bit generator.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import _coerce

MAGIC = b"DCVF"
VERSION = 1
POOLED, SPATIAL = 0, 1
SPLITS = ("train", "val", "test", "unassigned")
DEFAULT_CHANNELS = (96, 192, 384, 768)


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- clips

@dataclass
class FeatureClip:
    """Per-frame backbone features of one video.

    Each entry of ``levels`` is either pooled (``N x c``) or spatial
    (``N x h x w x c``). Values are held as float32 so that the on-disk
    format round-trips exactly.
    """

    levels: list[np.ndarray]
    source_id: str = ""

    def __post_init__(self):
        self.levels = [np.ascontiguousarray(lv, dtype=np.float32) for lv in self.levels]
        if not self.levels:
            raise ValueError("a clip needs at least one level")
        n = self.levels[0].shape[0]
        for lv in self.levels:
            if lv.ndim not in (2, 4):
                raise ValueError(f"level must be N x c or N x h x w x c, got {lv.shape}")
            if lv.shape[0] != n or n < 1:
                raise ValueError("all levels must share the same positive frame count")
            if min(lv.shape[1:]) < 1:
                raise ValueError(f"empty level dimension in {lv.shape}")
            if not np.all(np.isfinite(lv)):
                raise NonFiniteError("clip contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.levels[0].shape[0]

    @property
    def channels(self) -> list[int]:
        return [lv.shape[-1] for lv in self.levels]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureClip) or len(self.levels) != len(other.levels):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.levels, other.levels))


def encode_feature_clip(clip: FeatureClip) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, clip.n_frames, len(clip.levels))]
    for lv in clip.levels:
        if lv.ndim == 2:
            parts.append(struct.pack("<BI", POOLED, lv.shape[1]))
        else:
            parts.append(struct.pack("<BIII", SPATIAL, *lv.shape[1:]))
        parts.append(lv.astype("<f4").tobytes())
    return b"".join(parts)


def decode_feature_clip(buf: bytes, source_id: str = "") -> FeatureClip:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a feature file (magic {buf[:4]!r})")
    pos = 4

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise TruncatedFileError(f"file ends at byte {len(buf)}, expected {pos + size}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = read("<I")
    if version != VERSION:
        raise VersionMismatchError(f"feature file version {version}, expected {VERSION}")
    n, n_levels = read("<II")
    if n < 1 or n_levels < 1:
        raise FeatureFileError(f"invalid header: N={n}, L={n_levels}")
    levels = []
    for _ in range(n_levels):
        (kind,) = read("<B")
        if kind == POOLED:
            dims = read("<I")
        elif kind == SPATIAL:
            dims = read("<III")
        else:
            raise FeatureFileError(f"unknown level kind {kind}")
        shape = (n, *dims)
        count = math.prod(shape)
        nbytes = 4 * count
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"level payload needs {nbytes} bytes, {len(buf) - pos} left")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("feature file contains non-finite values")
        levels.append(arr.astype(np.float32))
    if pos != len(buf):
        raise FeatureFileError(f"{len(buf) - pos} trailing bytes after last level")
    return FeatureClip(levels, source_id=source_id)


def write_feature_file(clip: FeatureClip, path) -> None:
    Path(path).write_bytes(encode_feature_clip(clip))


def read_feature_file(path) -> FeatureClip:
    path = Path(path)
    return decode_feature_clip(path.read_bytes(), source_id=path.stem)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    video_id: str
    feature_path: str
    mos: float
    split: str = "unassigned"


def load_manifest(path) -> list[ManifestEntry]:
    """Parse ``video_id,feature_path,mos[,split]``; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in ("video_id", "feature_path", "mos") if c not in cols]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        entries: list[ManifestEntry] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            vid = row["video_id"]
            if vid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate video_id {vid!r}")
            seen.add(vid)
            try:
                mos = float(row["mos"])
            except (TypeError, ValueError):
                raise ManifestError(f"{path}:{lineno}: cannot parse mos {row['mos']!r}") from None
            if not math.isfinite(mos):
                raise ManifestError(f"{path}:{lineno}: mos must be finite")
            split = (row.get("split") or "unassigned").strip() or "unassigned"
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            fpath = Path(row["feature_path"])
            if not fpath.is_absolute():
                fpath = base / fpath
            entries.append(ManifestEntry(vid, str(fpath), mos, split))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path, relative_to=None) -> None:
    """Write a manifest; paths are stored relative to ``relative_to`` when given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "feature_path", "mos", "split"])
        for e in entries:
            fpath = e.feature_path
            if relative_to is not None:
                try:
                    fpath = str(Path(fpath).relative_to(relative_to))
                except ValueError:
                    pass
            w.writerow([e.video_id, fpath, repr(float(e.mos)), e.split])


def split_dataset(entries: Sequence[ManifestEntry], ratios=(0.6, 0.2, 0.2), seed: int = 0,
                  sizes: tuple[int, int, int] | None = None) -> list[ManifestEntry]:
    """Assign train/val/test by a seeded shuffle; input order is preserved.

    Sizes are ``floor(0.6 n)``, ``floor(0.2 n)`` and the remainder unless
    explicit ``sizes`` are passed.
    """
    n = len(entries)
    if n < 3:
        raise ValueError(f"need at least 3 entries to split, got {n}")
    if sizes is None:
        n_train = math.floor(ratios[0] * n)
        n_val = math.floor(ratios[1] * n)
    else:
        if sum(sizes) != n or min(sizes) < 0:
            raise ValueError(f"sizes {sizes} do not partition {n} entries")
        n_train, n_val = sizes[0], sizes[1]
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    return [replace(e, split=str(labels[i])) for i, e in enumerate(entries)]


# ---------------------------------------------------------------- synthetic clips

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    Two effects are planted. Flicker bursts are runs of ``burst_length``
    frames whose features are offset along a fixed direction per level
    (strong in shallow levels, faint in the deepest). Offsets are positive
    unless ``signed_bursts`` is set, in which case each frame draws a random
    sign. Each clip draws its own burst rate from
    ``distortion_burst_rate * U(1 - burst_rate_spread, 1 + burst_rate_spread)``.

    Content is constant over aligned runs of ``content_run`` frames. A fixed
    share (``theme_fraction``) of the runs carries the clip's theme vector;
    the others show unrelated content. With ``split_content`` themes and
    off-topic content occupy complementary halves of the content space, so
    off-topic frames are recognisable on their own as well as by comparison.
    A frame's importance is its content alignment with the theme, floored at
    ``importance_floor``.
    """

    n_frames: int = 64
    n_levels: int = 4
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    theme_vector_dim: int = 4
    content_scale: float = 1.0
    distortion_burst_rate: float = 0.425
    burst_rate_spread: float = 0.65
    theme_segments: tuple[int, ...] | None = None
    noise_scale: float = 0.05
    theme_fraction: float = 0.5
    burst_length: int = 8
    content_run: int = 8
    burst_amplitude: tuple[float, float] = (1.5, 3.0)
    importance_floor: float = 0.1
    signed_bursts: bool = False
    split_content: bool = True
    spatial: tuple[int, int] | None = None
    world_seed: int = 20220101

    def validate(self) -> None:
        if self.n_frames < 1 or self.n_levels < 1 or self.theme_vector_dim < 1:
            raise ValueError("n_frames, n_levels and theme_vector_dim must be positive")
        if len(self.channels) != self.n_levels or min(self.channels) < 1:
            raise ValueError(f"channels {self.channels} must list {self.n_levels} positive widths")
        for name in ("distortion_burst_rate", "burst_rate_spread", "theme_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.importance_floor <= 1.0:
            raise ValueError("importance_floor must lie in (0, 1]")
        if self.content_scale <= 0:
            raise ValueError("content_scale must be positive")
        if self.noise_scale < 0 or self.burst_length < 1 or self.content_run < 1:
            raise ValueError("noise_scale must be >= 0 and run lengths >= 1")
        if self.theme_segments is not None:
            if any(not 0 <= i < self.n_frames for i in self.theme_segments):
                raise ValueError("theme_segments must index frames in [0, n_frames)")
        if self.spatial is not None and min(self.spatial) < 1:
            raise ValueError("spatial size must be positive")


_TUPLE_ITEMS = {"channels": int, "theme_segments": int, "spatial": int, "burst_amplitude": float}


def parse_spec_text(text: str, source: str = "<spec>") -> SyntheticSpec:
    """Read generator settings from ``key = value`` lines with ``#`` comments.

    Tuples are comma separated; ``none`` clears an optional tuple.
    """
    defaults = SyntheticSpec()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_ITEMS:
                kind = _TUPLE_ITEMS[key]
                values[key] = None if value.lower() == "none" else tuple(
                    kind(v) for v in value.split(",") if v.strip())
            else:
                values[key] = _coerce(key, value, type(getattr(defaults, key)))
        except ValueError:
            raise ValueError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
    spec = replace(defaults, **values)
    if "channels" in values and "n_levels" not in values:
        spec = replace(spec, n_levels=len(spec.channels))
    spec.validate()
    return spec


@dataclass
class GroundTruth:
    """Sidecar recording the planted structure of one synthetic clip."""

    burst: np.ndarray       # 0/1 per frame
    importance: np.ndarray  # theme alignment per frame
    theme: np.ndarray       # 0/1 per frame
    mos: float = field(default=0.0)

    def to_json(self) -> dict:
        return {"mos": self.mos, "burst": self.burst.astype(int).tolist(),
                "importance": self.importance.tolist(), "theme": self.theme.astype(int).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(np.asarray(obj["burst"], dtype=np.int64), np.asarray(obj["importance"], dtype=np.float64),
                   np.asarray(obj["theme"], dtype=np.int64), float(obj["mos"]))


def mos_from_ground_truth(burst, importance) -> float:
    """``5 - 4 * clamp(sum(imp * burst) / sum(imp), 0, 1)``."""
    burst = np.asarray(burst, dtype=np.float64)
    importance = np.asarray(importance, dtype=np.float64)
    frac = float(np.sum(importance * burst) / np.sum(importance))
    return 5.0 - 4.0 * min(max(frac, 0.0), 1.0)


def _rng(*words: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(words))))


def _world(spec: SyntheticSpec):
    """Fixed per-spec 'backbone': content embeddings and flicker directions per level."""
    rng = _rng(spec.world_seed, 0)
    d = spec.theme_vector_dim
    embeds, flicker = [], []
    for lvl, c in enumerate(spec.channels):
        frac = (lvl + 1) / spec.n_levels
        e = rng.standard_normal((d, c)) / math.sqrt(d)
        b = rng.standard_normal(c)
        if c > d:
            # keep flicker orthogonal to the content subspace
            q, _ = np.linalg.qr(e.T)
            b = b - q @ (q.T @ b)
        b /= np.linalg.norm(b) + 1e-300
        embeds.append(e * (0.25 + 0.75 * frac) * spec.content_scale)
        flicker.append(b * (1.0 - 0.9 * frac + 0.1 / spec.n_levels) * math.sqrt(c) / 4.0)
    return embeds, flicker


def _slots(rng: np.random.Generator, n: int, fraction: float, length: int) -> np.ndarray:
    """0/1 mask over aligned slots of ``length`` frames; exactly ``round(fraction * slots)`` are set."""
    slots = -(-n // length)
    mask = np.zeros(n, dtype=np.int64)
    for s in rng.choice(slots, int(round(fraction * slots)), replace=False):
        mask[s * length:(s + 1) * length] = 1
    return mask


def _runs(rng: np.random.Generator, n: int, rate: float, length: int) -> np.ndarray:
    """0/1 mask built from runs of ``length`` frames covering about ``rate`` of the clip."""
    mask = np.zeros(n, dtype=np.int64)
    if rate <= 0:
        return mask
    n_runs = rng.binomial(max(1, n // length), min(1.0, rate))
    for _ in range(n_runs):
        start = int(rng.integers(0, max(1, n - length + 1)))
        mask[start:start + length] = 1
    return mask


def generate_synthetic_clip(spec: SyntheticSpec, seed: int) -> tuple[FeatureClip, float, GroundTruth]:
    """Deterministic synthetic clip, its MOS and the ground-truth sidecar."""
    spec.validate()
    rng = _rng(spec.world_seed, 1, seed)
    n, d = spec.n_frames, spec.theme_vector_dim
    embeds, flicker = _world(spec)

    # with split content, themes use the first half of the content space and off-topic runs the rest
    half = d // 2 if spec.split_content and d > 1 else 0
    theme_dir = rng.standard_normal(d)
    if half:
        theme_dir[half:] = 0.0
    theme_dir /= np.linalg.norm(theme_dir)
    if spec.theme_segments is not None:
        theme = np.zeros(n, dtype=np.int64)
        theme[list(spec.theme_segments)] = 1
    else:
        theme = _slots(rng, n, spec.theme_fraction, spec.content_run)
    content = np.empty((n, d))
    for start in range(0, n, spec.content_run):
        other = rng.standard_normal(d)
        other[:half] = 0.0
        other /= np.linalg.norm(other)
        content[start:start + spec.content_run] = other
    content[theme == 1] = theme_dir
    importance = np.maximum(content @ theme_dir, spec.importance_floor)
    importance = np.minimum(importance, 1.0)

    rate, spread = spec.distortion_burst_rate, spec.burst_rate_spread
    clip_rate = min(1.0, rate * rng.uniform(1.0 - spread, 1.0 + spread)) if rate > 0 else 0.0
    burst = _runs(rng, n, clip_rate, spec.burst_length)
    lo, hi = spec.burst_amplitude
    signs = rng.choice([-1.0, 1.0], n)
    jumps = rng.uniform(lo, hi, n) * (signs if spec.signed_bursts else 1.0) * burst

    levels = []
    for e, b in zip(embeds, flicker):
        lv = content @ e + jumps[:, None] * b[None, :]
        if spec.noise_scale > 0:
            lv = lv + spec.noise_scale * rng.standard_normal(lv.shape)
        if spec.spatial is not None:
            h, w = spec.spatial
            spread = rng.standard_normal((n, h, w, lv.shape[1])) * spec.noise_scale
            spread -= spread.mean(axis=(1, 2), keepdims=True)
            lv = lv[:, None, None, :] + spread
        levels.append(lv)

    mos = mos_from_ground_truth(burst, importance)
    truth = GroundTruth(burst=burst, importance=importance, theme=theme, mos=mos)
    return FeatureClip(levels, source_id=f"synthetic-{seed}"), mos, truth


def write_sidecar(truths: dict[str, GroundTruth], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, gt in truths.items():
            fh.write(json.dumps({"video_id": vid, **gt.to_json()}) + "\n")


def read_sidecar(path) -> dict[str, GroundTruth]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["video_id"]] = GroundTruth.from_json(obj)
    return out


def clip_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint64)[0])


def generate_corpus(spec: SyntheticSpec, count: int, out_dir, seed: int = 0,
                    sizes: tuple[int, int, int] | None = None) -> list[ManifestEntry]:
    """Write ``count`` synthetic feature files, ``manifest.csv`` and ``ground_truth.jsonl``.

    Splits are assigned with :func:`split_dataset` when ``count >= 3``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, truths = [], {}
    width = max(4, len(str(max(count - 1, 0))))
    for i in range(count):
        vid = f"syn{i:0{width}d}"
        clip, mos, truth = generate_synthetic_clip(spec, clip_seed(seed, i))
        path = out_dir / f"{vid}.dcvf"
        write_feature_file(clip, path)
        entries.append(ManifestEntry(vid, str(path), mos))
        truths[vid] = truth
    if count >= 3:
        entries = split_dataset(entries, seed=seed, sizes=sizes)
    write_manifest(entries, out_dir / "manifest.csv", relative_to=out_dir)
    write_sidecar(truths, out_dir / "ground_truth.jsonl")
    return entries
