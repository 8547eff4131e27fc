import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discovqa.features import (BadMagicError, FeatureClip, ManifestEntry, ManifestError, NonFiniteError,
                               SyntheticSpec, TruncatedFileError, VersionMismatchError, decode_feature_clip,
                               encode_feature_clip, generate_corpus, generate_synthetic_clip, load_manifest,
                               mos_from_ground_truth, parse_spec_text, read_feature_file, read_sidecar,
                               split_dataset, write_feature_file)
from discovqa.metrics import plcc

SMALL = SyntheticSpec(n_frames=16, channels=(4, 6, 8, 10), theme_vector_dim=3)


def random_clip(rng, n=5, spatial=False):
    levels = [rng.standard_normal((n, 3)).astype(np.float32)]
    if spatial:
        levels.append(rng.standard_normal((n, 2, 3, 4)).astype(np.float32))
    return FeatureClip(levels)


class TestFeatureFile:
    def test_round_trip_is_bit_identical(self, tmp_path):
        clip = random_clip(np.random.default_rng(0), spatial=True)
        write_feature_file(clip, tmp_path / "a.dcvf")
        back = read_feature_file(tmp_path / "a.dcvf")
        assert back == clip
        assert back.source_id == "a"

    def test_minimal_clip(self, tmp_path):
        clip = FeatureClip([np.array([[1.25]], dtype=np.float32)])
        write_feature_file(clip, tmp_path / "m.dcvf")
        assert read_feature_file(tmp_path / "m.dcvf") == clip

    def test_header_layout(self):
        buf = encode_feature_clip(FeatureClip([np.zeros((2, 3), dtype=np.float32)]))
        assert buf[:4] == b"DCVF"
        assert struct.unpack_from("<IIIBI", buf, 4) == (1, 2, 1, 0, 3)
        assert len(buf) == 4 + 12 + 5 + 2 * 3 * 4

    def test_bad_magic(self):
        buf = bytearray(encode_feature_clip(random_clip(np.random.default_rng(1))))
        buf[:4] = b"XXXX"
        with pytest.raises(BadMagicError):
            decode_feature_clip(bytes(buf))

    def test_version_mismatch(self):
        buf = bytearray(encode_feature_clip(random_clip(np.random.default_rng(1))))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionMismatchError):
            decode_feature_clip(bytes(buf))

    def test_truncated(self):
        buf = encode_feature_clip(random_clip(np.random.default_rng(1)))
        with pytest.raises(TruncatedFileError):
            decode_feature_clip(buf[:-3])

    def test_non_finite(self):
        buf = bytearray(encode_feature_clip(FeatureClip([np.zeros((1, 1), dtype=np.float32)])))
        buf[-4:] = struct.pack("<f", float("nan"))
        with pytest.raises(NonFiniteError):
            decode_feature_clip(bytes(buf))

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, NonFiniteError}
        assert len(kinds) == 4 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 6), widths=st.lists(st.integers(1, 5), min_size=1, max_size=3),
       spatial=st.booleans(), seed=st.integers(0, 2**31))
def test_round_trip_property(n, widths, spatial, seed):
    rng = np.random.default_rng(seed)
    levels = []
    for i, c in enumerate(widths):
        shape = (n, 2, 2, c) if spatial and i % 2 else (n, c)
        levels.append((rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3)).astype(np.float32))
    clip = FeatureClip(levels)
    assert decode_feature_clip(encode_feature_clip(clip)) == clip


class TestSynthetic:
    def test_no_distortion_case(self):
        spec = SyntheticSpec(n_frames=12, channels=(4, 6, 8, 10), theme_vector_dim=3, distortion_burst_rate=0.0,
                             noise_scale=0.0, theme_segments=tuple(range(12)))
        clip, mos, truth = generate_synthetic_clip(spec, 3)
        assert mos == 5.0
        for lv in clip.levels:
            assert np.all(lv == lv[0])
        assert truth.burst.sum() == 0

    def test_deterministic(self):
        a = generate_synthetic_clip(SMALL, 42)
        b = generate_synthetic_clip(SMALL, 42)
        assert a[0] == b[0] and a[1] == b[1]

    def test_distinct_seeds_differ(self):
        assert generate_synthetic_clip(SMALL, 1)[0] != generate_synthetic_clip(SMALL, 2)[0]

    @pytest.mark.parametrize("seed", range(10))
    def test_mos_matches_closed_form(self, seed):
        _, mos, truth = generate_synthetic_clip(SyntheticSpec(), seed)
        imp, burst = truth.importance, truth.burst
        frac = sum(i * b for i, b in zip(imp, burst)) / sum(imp)
        assert abs(mos - (5 - 4 * min(max(frac, 0), 1))) < 1e-12
        assert 1.0 <= mos <= 5.0

    def test_spatial_levels_pool_to_pooled_signal(self):
        spec = SyntheticSpec(n_frames=8, channels=(4, 6), n_levels=2, theme_vector_dim=3, spatial=(2, 3))
        clip, _, _ = generate_synthetic_clip(spec, 0)
        assert clip.levels[0].shape == (8, 2, 3, 4)

    @pytest.mark.parametrize("bad", [dict(distortion_burst_rate=1.5), dict(theme_segments=(99,)),
                                     dict(channels=(4, 5)), dict(n_frames=0)])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            generate_synthetic_clip(SyntheticSpec(**{**dict(channels=(4, 6, 8, 10)), **bad}), 0)

    def test_bursts_lower_mos(self):
        spec = SyntheticSpec(n_frames=32, channels=(2, 2, 2, 2), theme_vector_dim=3)
        bursts, moses = [], []
        for seed in range(1000):
            _, mos, truth = generate_synthetic_clip(spec, seed)
            bursts.append(truth.burst.sum())
            moses.append(mos)
        assert plcc(bursts, moses) < 0


    @pytest.mark.parametrize("seed", range(5))
    def test_theme_share_is_fixed(self, seed):
        _, _, truth = generate_synthetic_clip(SyntheticSpec(), seed)
        assert truth.theme.sum() == 32
        # whole content runs of 8 frames
        assert all(len(set(truth.theme[i:i + 8])) == 1 for i in range(0, 64, 8))

    def test_split_content_floors_off_topic_frames(self):
        _, _, truth = generate_synthetic_clip(SyntheticSpec(), 5)
        assert np.all(truth.importance[truth.theme == 1] == 1.0)
        assert np.all(truth.importance[truth.theme == 0] == 0.1)
        _, _, mixed = generate_synthetic_clip(SyntheticSpec(split_content=False, theme_vector_dim=16), 5)
        assert len(set(np.round(mixed.importance[mixed.theme == 0], 9))) > 1

    def test_burst_sign_only_changes_burst_frames(self):
        a, mos_a, ta = generate_synthetic_clip(SMALL, 8)
        b, mos_b, tb = generate_synthetic_clip(replace(SMALL, signed_bursts=True), 8)
        assert mos_a == mos_b and np.array_equal(ta.burst, tb.burst)
        differs = np.any(a.levels[0] != b.levels[0], axis=1)
        assert differs.any() and not differs[ta.burst == 0].any()

    @pytest.mark.parametrize("bad", [dict(burst_rate_spread=1.5), dict(content_scale=0.0),
                                     dict(importance_floor=0.0)])
    def test_invalid_generator_knobs(self, bad):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad).validate()

    def test_spec_text(self):
        spec = parse_spec_text("# small\nn_frames = 8\nchannels = 3, 4\nsigned_bursts = yes\nspatial = none\n")
        assert (spec.n_frames, spec.channels, spec.n_levels, spec.signed_bursts) == (8, (3, 4), 2, True)
        with pytest.raises(ValueError, match="<spec>:1:"):
            parse_spec_text("signed_bursts = maybe")

class TestSplit:
    def entries(self, n):
        return [ManifestEntry(f"v{i}", f"v{i}.dcvf", 3.0) for i in range(n)]

    def test_ten_entries(self):
        splits = [e.split for e in split_dataset(self.entries(10), seed=0)]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (6, 2, 2)

    def test_deterministic(self):
        a = [e.split for e in split_dataset(self.entries(50), seed=5)]
        b = [e.split for e in split_dataset(self.entries(50), seed=5)]
        c = [e.split for e in split_dataset(self.entries(50), seed=6)]
        assert a == b and a != c

    def test_partition(self):
        out = split_dataset(self.entries(1000), seed=1)
        groups = {s: {e.video_id for e in out if e.split == s} for s in ("train", "val", "test")}
        assert [len(groups[s]) for s in ("train", "val", "test")] == [600, 200, 200]
        assert set().union(*groups.values()) == {f"v{i}" for i in range(1000)}
        assert not (groups["train"] & groups["val"]) and not (groups["val"] & groups["test"])

    def test_explicit_sizes(self):
        out = split_dataset(self.entries(332), seed=0, sizes=(200, 66, 66))
        assert [sum(e.split == s for e in out) for s in ("train", "val", "test")] == [200, 66, 66]

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_dataset(self.entries(2))


class TestManifest:
    def test_header_only(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,feature_path,mos\n")
        assert load_manifest(p) == []

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,feature_path,mos\na,a.dcvf,1\na,b.dcvf,2\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,mos\na,1\n")
        with pytest.raises(ManifestError, match="feature_path"):
            load_manifest(p)

    def test_bad_mos(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,feature_path,mos\na,a.dcvf,good\n")
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(p)

    def test_fixture(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("video_id,feature_path,mos,split\n"
                     "clip_a,feats/a.dcvf,3.5,train\n"
                     "clip_b,/abs/b.dcvf,1.25,val\n"
                     "clip_c,c.dcvf,4,\n")
        assert load_manifest(p) == [
            ManifestEntry("clip_a", str(tmp_path / "feats/a.dcvf"), 3.5, "train"),
            ManifestEntry("clip_b", "/abs/b.dcvf", 1.25, "val"),
            ManifestEntry("clip_c", str(tmp_path / "c.dcvf"), 4.0, "unassigned"),
        ]


def test_corpus_round_trip(tmp_path):
    entries = generate_corpus(SMALL, 6, tmp_path, seed=3)
    loaded = load_manifest(tmp_path / "manifest.csv")
    assert [(e.video_id, e.mos, e.split) for e in loaded] == [(e.video_id, e.mos, e.split) for e in entries]
    truths = read_sidecar(tmp_path / "ground_truth.jsonl")
    for e in loaded:
        gt = truths[e.video_id]
        assert mos_from_ground_truth(gt.burst, gt.importance) == e.mos
        assert read_feature_file(e.feature_path).n_frames == SMALL.n_frames
