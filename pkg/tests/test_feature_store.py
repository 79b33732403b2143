"""Tests for the feature file format, manifest, and planted-cue generator."""

import math
import struct

import numpy as np
import pytest

from moereid.errors import (
    ConfigError,
    FormatError,
    MetadataError,
    TruncationError,
    UnsupportedDtypeError,
)
from moereid.feature_store import (
    CUE_AMPLITUDE,
    FeatureVolume,
    Manifest,
    ManifestRecord,
    SyntheticSpec,
    cue_blocks,
    gen_synthetic,
    load_record,
    load_split,
    read_manifest,
    read_volume,
    subject_frequency,
    write_manifest,
    write_synthetic,
    write_volume,
)
from moereid.numerics import Tensor


def _volume(rng, t=2, k=5, c=8):
    return FeatureVolume(data=Tensor(rng.normal(size=(t, k, c))))


class TestVolumeRoundtrip:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(100):
            t = int(rng.integers(1, 5))
            k = int(rng.integers(1, 9))
            c = int(rng.integers(1, 17))
            v = FeatureVolume(data=Tensor(rng.normal(size=(t, k, c))))
            path = tmp_path / f"v{i}.hfv1"
            write_volume(v, path)
            back = read_volume(path)
            assert back.dims == (t, k, c)
            # Payload is f32: compare after the same quantization.
            expected = v.data.data.astype(np.float32)
            assert np.array_equal(back.data.data.astype(np.float32), expected)
            write_volume(back, tmp_path / "again.hfv1")
            assert (tmp_path / "again.hfv1").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path):
        v = FeatureVolume(data=Tensor(np.zeros((2, 3, 4))))
        path = tmp_path / "v.hfv1"
        write_volume(v, path)
        raw = path.read_bytes()
        assert raw[:4] == b"HFV1"
        version, t, k, c = struct.unpack_from("<IIII", raw, 4)
        assert (version, t, k, c) == (1, 2, 3, 4)
        assert raw[20] == 0  # dtype code f32
        assert raw[21:24] == b"\x00\x00\x00"
        assert len(raw) == 24 + 2 * 3 * 4 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hfv1"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_volume(path)

    def test_truncated_payload(self, tmp_path):
        # Header claims 2*3*4 = 24 floats; write only 23.
        path = tmp_path / "trunc.hfv1"
        header = struct.pack("<4sIIIIB3x", b"HFV1", 1, 2, 3, 4, 0)
        path.write_bytes(header + b"\x00" * (23 * 4))
        with pytest.raises(TruncationError):
            read_volume(path)

    def test_unsupported_dtype(self, tmp_path):
        path = tmp_path / "f64.hfv1"
        header = struct.pack("<4sIIIIB3x", b"HFV1", 1, 1, 1, 1, 7)
        path.write_bytes(header + b"\x00" * 4)
        with pytest.raises(UnsupportedDtypeError):
            read_volume(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.hfv1"
        header = struct.pack("<4sIIIIB3x", b"HFV1", 9, 1, 1, 1, 0)
        path.write_bytes(header + b"\x00" * 4)
        with pytest.raises(FormatError):
            read_volume(path)

    def test_payload_index_order(self, tmp_path):
        # t outer, k middle, c inner: value at (t,k,c) sits at ((t*K)+k)*C+c.
        data = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
        path = tmp_path / "order.hfv1"
        write_volume(FeatureVolume(data=Tensor(data)), path)
        payload = np.frombuffer(path.read_bytes()[24:], dtype="<f4")
        assert payload[(1 * 3 + 2) * 4 + 3] == data[1, 2, 3]


class TestVolumeValidation:
    def test_valid_volume(self):
        v = FeatureVolume(data=Tensor(np.zeros((2, 5, 8))))
        v.validate()

    def test_token_count_must_be_grid_plus_cls(self):
        v = FeatureVolume(data=Tensor(np.zeros((2, 6, 8))))
        with pytest.raises(FormatError):
            v.validate()

    def test_channels_divisible_by_four(self):
        v = FeatureVolume(data=Tensor(np.zeros((2, 5, 6))))
        with pytest.raises(FormatError):
            v.validate()

    def test_non_finite_rejected(self):
        data = np.zeros((2, 5, 8))
        data[0, 0, 0] = np.inf
        v = FeatureVolume(data=Tensor(data))
        with pytest.raises(FormatError):
            v.validate()


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = [
            ManifestRecord("a.hfv1", 0, 0, 0, 0, "query"),
            ManifestRecord("b.hfv1", 0, 1, 1, 1, "gallery"),
        ]
        path = tmp_path / "manifest.jsonl"
        write_manifest(Manifest(records), path)
        back = read_manifest(path)
        assert back.records == records

    def test_duplicate_paths_rejected(self):
        records = [ManifestRecord("a.hfv1", 0, 0, 0, 0, "query")] * 2
        with pytest.raises(MetadataError):
            Manifest(records).validate()

    def test_missing_file_rejected(self, tmp_path):
        m = Manifest([ManifestRecord("ghost.hfv1", 0, 0, 0, 0, "query")])
        with pytest.raises(MetadataError):
            m.validate(base_dir=tmp_path)

    def test_lone_training_tracklet_rejected(self, tmp_path):
        write_volume(_volume(np.random.default_rng(0)), tmp_path / "a.hfv1")
        m = Manifest([ManifestRecord("a.hfv1", 0, 0, 0, 0, "train")])
        with pytest.raises(MetadataError):
            m.validate(base_dir=tmp_path)

    def test_unknown_split_rejected(self, tmp_path):
        write_volume(_volume(np.random.default_rng(0)), tmp_path / "a.hfv1")
        m = Manifest([ManifestRecord("a.hfv1", 0, 0, 0, 0, "holdout")])
        with pytest.raises(MetadataError):
            m.validate(base_dir=tmp_path)


class TestSynthetic:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=2, seed=5)
        _, a = gen_synthetic(spec)
        _, b = gen_synthetic(spec)
        for va, vb in zip(a, b):
            assert np.array_equal(va.data.data, vb.data.data)

    def test_different_seed_differs(self):
        base = SyntheticSpec(num_subjects=2, tracklets_per_subject=2, seed=5)
        other = SyntheticSpec(num_subjects=2, tracklets_per_subject=2, seed=6)
        _, a = gen_synthetic(base)
        _, b = gen_synthetic(other)
        assert not np.array_equal(a[0].data.data, b[0].data.data)

    def test_long_term_block_constant_per_subject(self):
        spec = SyntheticSpec(num_subjects=3, tracklets_per_subject=2,
                             cue="long_term", noise_sigma=0.0, seed=1)
        _, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["long_term"]
        by_subject = {}
        for v in volumes:
            mean = v.data.data[:, :, block].mean(axis=(0, 1))
            by_subject.setdefault(v.subject_id, []).append(mean)
        for subject, means in by_subject.items():
            assert np.max(np.abs(means[0] - means[1])) < 1e-12
        m0 = by_subject[0][0]
        m1 = by_subject[1][0]
        assert np.max(np.abs(m0 - m1)) > 1e-3

    def test_short_term_offsets_differ_across_tracklets(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=4,
                             cue="short_term", noise_sigma=0.0, seed=2)
        _, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["short_term"]
        subject0 = [v for v in volumes if v.subject_id == 0]
        offs = [v.data.data[:, :, block].mean(axis=(0, 1)) for v in subject0]
        # Constant within a tracklet.
        per_frame = subject0[0].data.data[:, :, block]
        assert np.max(np.abs(per_frame - per_frame[0, 0])) < 1e-6
        # Distinct across tracklets of the same subject.
        for i in range(len(offs)):
            for j in range(i + 1, len(offs)):
                assert np.max(np.abs(offs[i] - offs[j])) > 1e-3

    def test_sc_split_shares_query_gallery_offset(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=4,
                             cue="short_term", noise_sigma=0.0, seed=3,
                             sc_split=True)
        manifest, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["short_term"]
        subject0 = [v for v in volumes if v.subject_id == 0]
        query = subject0[0].data.data[:, :, block]
        gallery = subject0[1].data.data[:, :, block]
        assert np.max(np.abs(query - gallery)) < 1e-12
        recs = [r for r in manifest.records if r.subject_id == 0]
        assert recs[0].clothes_id == recs[1].clothes_id

    def test_without_sc_split_offsets_differ(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=4,
                             cue="short_term", noise_sigma=0.0, seed=3)
        _, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["short_term"]
        subject0 = [v for v in volumes if v.subject_id == 0]
        query = subject0[0].data.data[:, :, block]
        gallery = subject0[1].data.data[:, :, block]
        assert np.max(np.abs(query - gallery)) > 1e-3

    def test_temporal_cue_matches_sine_oracle(self):
        spec = SyntheticSpec(num_subjects=3, tracklets_per_subject=2,
                             cue="temporal", noise_sigma=0.0, seed=4, T=8)
        _, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["temporal"]
        for v in volumes:
            # Re-derive the planted wave from (seed, subject, tracklet) alone.
            omega = math.pi * (v.subject_id + 1) / (spec.num_subjects + 1)
            tracklet_index = v.tracklet_id % spec.tracklets_per_subject
            phase_rng = np.random.default_rng(np.random.SeedSequence(
                spec.seed, spawn_key=(3, v.subject_id, tracklet_index)))
            phase = phase_rng.uniform(0.0, 2.0 * math.pi)
            wave = CUE_AMPLITUDE * np.sin(omega * np.arange(spec.T) + phase)
            wave32 = wave.astype(np.float32).astype(np.float64)
            got = v.data.data[:, :, block]
            assert np.max(np.abs(got - wave32[:, None, None])) < 1e-6
            assert abs(subject_frequency(spec, v.subject_id) - omega) < 1e-15

    def test_mixed_activates_all_blocks_and_noise_tail(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=2,
                             cue="mixed", noise_sigma=0.0, seed=7)
        _, volumes = gen_synthetic(spec)
        blocks = cue_blocks(spec.C)
        v = volumes[0].data.data
        for name in ("long_term", "short_term", "temporal"):
            assert np.max(np.abs(v[:, :, blocks[name]])) > 1e-3, name
        tail = slice(3 * (spec.C // 8), spec.C)
        assert np.max(np.abs(v[:, :, tail])) == 0.0

    def test_noise_everywhere_when_sigma_positive(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=2,
                             cue="long_term", noise_sigma=0.5, seed=8)
        _, volumes = gen_synthetic(spec)
        tail = slice(3 * (spec.C // 8), spec.C)
        assert np.std(volumes[0].data.data[:, :, tail]) > 0.1

    def test_nearest_centroid_sanity(self):
        # Planted long-term signal must be linearly recoverable.
        spec = SyntheticSpec(num_subjects=5, tracklets_per_subject=4,
                             cue="long_term", noise_sigma=0.0, seed=9)
        _, volumes = gen_synthetic(spec)
        block = cue_blocks(spec.C)["long_term"]
        feats = np.stack([v.data.data[:, :, block].mean(axis=(0, 1))
                          for v in volumes])
        labels = np.array([v.subject_id for v in volumes])
        centroids = np.stack([feats[labels == s].mean(axis=0)
                              for s in range(spec.num_subjects)])
        pred = np.argmin(
            ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(-1), axis=1)
        assert np.array_equal(pred, labels)

    def test_splits_and_camera_assignment(self):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=4, seed=0)
        manifest, _ = gen_synthetic(spec)
        for r in manifest.records:
            within = r.tracklet_id % spec.tracklets_per_subject
            expected = {0: "query", 1: "gallery"}.get(within, "train")
            assert r.split == expected
            assert r.camera_id == within

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(num_subjects=1).validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(tracklets_per_subject=1).validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(tracklets_per_subject=3).validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(noise_sigma=-0.1).validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(cue="seasonal").validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(C=4).validate()
        with pytest.raises(ConfigError):
            SyntheticSpec(K=12).validate()

    def test_write_synthetic_materializes_dataset(self, tmp_path):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=4, seed=0)
        manifest_path = write_synthetic(spec, tmp_path / "data")
        manifest = read_manifest(manifest_path)
        manifest.validate(base_dir=manifest_path.parent)
        assert len(manifest.records) == 8
        train = load_split(manifest, "train", base_dir=manifest_path.parent)
        assert len(train) == 4
        assert train[0].dims == (spec.T, spec.K, spec.C)
        # In-memory and on-disk volumes agree bit-exactly after f32 storage.
        _, volumes = gen_synthetic(spec)
        loaded = load_record(manifest.records[0], base_dir=manifest_path.parent)
        assert np.array_equal(loaded.data.data, volumes[0].data.data)

    def test_loaded_volumes_are_read_only(self, tmp_path):
        spec = SyntheticSpec(num_subjects=2, tracklets_per_subject=2, seed=0)
        manifest_path = write_synthetic(spec, tmp_path / "data")
        manifest = read_manifest(manifest_path)
        v = load_record(manifest.records[0], base_dir=manifest_path.parent)
        with pytest.raises(ValueError):
            v.data.data[0, 0, 0] = 1.0
