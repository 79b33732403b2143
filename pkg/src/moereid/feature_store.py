"""On-disk feature volumes, manifests, and synthetic cue datasets.

HFV1 layout (little-endian, bit-exact):
  bytes 0-3   ASCII "HFV1"
  u32         version = 1
  u32 u32 u32 T, K, C
  u8          dtype (0 = f32)
  3 bytes     zero padding
  payload     T*K*C f32 values, index order t (outer), k, c (inner)

The file carries no identity metadata; the manifest (JSON lines, one record
per tracklet) does. Synthetic generation is fully determined by the seed:
every random draw comes from ``numpy`` PCG64 streams spawned from
``SeedSequence(seed, spawn_key)`` where the spawn key encodes the stream
role and subject/tracklet indices (see the ``_rng`` helper). This derivation
is part of the format contract so tests can regenerate cues independently.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    MetadataError,
    TruncationError,
    UnsupportedDtypeError,
)
from .numerics import Tensor

_MAGIC = b"HFV1"
_HEADER = struct.Struct("<4sIIIIB3x")
_DTYPE_F32 = 0

CUE_KINDS = ("long_term", "short_term", "temporal", "mixed")
# Large against the default noise so the planted signal, not the noise
# realization, dominates what a model can latch onto during training.
CUE_AMPLITUDE = 10.0

# Stream tags for seed spawning; stable across releases.
_STREAM_LONG = 1
_STREAM_SHORT = 2
_STREAM_PHASE = 3
_STREAM_NOISE = 4


@dataclass
class FeatureVolume:
    """One tracklet's [T x K x C] feature volume plus identity metadata."""

    data: Tensor
    subject_id: int = -1
    tracklet_id: int = -1
    clothes_id: int = -1
    camera_id: int = -1

    @property
    def dims(self) -> tuple[int, int, int]:
        t, k, c = self.data.shape
        return t, k, c

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise FormatError(f"feature volume must be rank 3, got {self.data.ndim}")
        _, k, c = self.data.shape
        grid = int(round(math.sqrt(k - 1)))
        if grid * grid != k - 1:
            raise FormatError(f"token count {k} is not patch_grid^2 + 1")
        if c % 4 != 0:
            raise FormatError(f"channel count {c} not divisible by 4")
        if not np.all(np.isfinite(self.data.data)):
            raise FormatError("feature volume contains non-finite values")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    subject_id: int
    tracklet_id: int
    clothes_id: int
    camera_id: int
    split: str


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def train_subjects(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.split("train"):
            counts[r.subject_id] = counts.get(r.subject_id, 0) + 1
        return counts

    def validate(self, base_dir: Path | None = None) -> None:
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise MetadataError("manifest paths are not unique")
        for r in self.records:
            if r.split not in ("train", "query", "gallery"):
                raise MetadataError(f"unknown split {r.split!r}")
            full = _resolve(r.path, base_dir)
            if not full.exists():
                raise MetadataError(f"referenced file missing: {r.path}")
        for subject, count in self.train_subjects().items():
            if count < 2:
                raise MetadataError(
                    f"training subject {subject} has {count} tracklet(s); needs >= 2")


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


def write_volume(volume: FeatureVolume, path: str | Path) -> None:
    path = Path(path)
    t, k, c = volume.dims
    payload = volume.data.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, t, k, c, _DTYPE_F32))
        fh.write(payload)


def read_volume(path: str | Path) -> FeatureVolume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than HFV1 header")
    magic, version, t, k, c, dtype = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != _DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: dtype code {dtype} (only f32 supported)")
    expected = t * k * c
    payload = raw[_HEADER.size:]
    if len(payload) != expected * 4:
        raise TruncationError(
            f"{path}: header declares {expected} f32 values, payload holds "
            f"{len(payload) // 4}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, k, c)
    return FeatureVolume(data=Tensor(data))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps({
                "path": r.path,
                "subject_id": r.subject_id,
                "tracklet_id": r.tracklet_id,
                "clothes_id": r.clothes_id,
                "camera_id": r.camera_id,
                "split": r.split,
            }) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(ManifestRecord(
                path=row["path"],
                subject_id=int(row["subject_id"]),
                tracklet_id=int(row["tracklet_id"]),
                clothes_id=int(row["clothes_id"]),
                camera_id=int(row["camera_id"]),
                split=row["split"],
            ))
    return Manifest(records)


def load_record(record: ManifestRecord, base_dir: Path | None = None) -> FeatureVolume:
    volume = read_volume(_resolve(record.path, base_dir))
    volume.subject_id = record.subject_id
    volume.tracklet_id = record.tracklet_id
    volume.clothes_id = record.clothes_id
    volume.camera_id = record.camera_id
    # Inputs stay frozen: training must never write into loaded features.
    volume.data.data.flags.writeable = False
    return volume


@dataclass
class SyntheticSpec:
    """Parameters of a planted-cue dataset."""

    num_subjects: int = 8
    tracklets_per_subject: int = 4
    T: int = 4
    K: int = 17
    C: int = 64
    cue: str = "mixed"
    noise_sigma: float = 0.1
    seed: int = 0
    sc_split: bool = False  # query/gallery of a subject share the short-term offset

    def validate(self) -> None:
        if self.num_subjects < 2:
            raise ConfigError("num_subjects must be >= 2")
        if self.tracklets_per_subject < 2:
            raise ConfigError("tracklets_per_subject must be >= 2")
        if self.tracklets_per_subject == 3:
            raise ConfigError(
                "tracklets_per_subject == 3 leaves a single training tracklet; "
                "use 2 (eval-only) or >= 4")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.cue not in CUE_KINDS:
            raise ConfigError(f"unknown cue {self.cue!r}")
        if 3 * (self.C // 8) > self.C or self.C < 8:
            raise ConfigError(f"cue blocks exceed C={self.C}")
        grid = int(round(math.sqrt(self.K - 1)))
        if grid * grid != self.K - 1:
            raise ConfigError(f"K={self.K} is not patch_grid^2 + 1")
        if self.C % 4 != 0:
            raise ConfigError(f"C={self.C} not divisible by 4")


def cue_blocks(C: int) -> dict[str, slice]:
    """Disjoint channel blocks: long, short, temporal, then pure noise."""
    eighth = C // 8
    return {
        "long_term": slice(0, eighth),
        "short_term": slice(eighth, 2 * eighth),
        "temporal": slice(2 * eighth, 3 * eighth),
    }


def subject_frequency(spec: SyntheticSpec, subject: int) -> float:
    """Per-subject angular frequency of the planted temporal cue."""
    return math.pi * (subject + 1) / (spec.num_subjects + 1)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _clothes_id(spec: SyntheticSpec, tracklet: int) -> int:
    # Tracklet 0 is the query, 1 the gallery, the rest train.
    if spec.sc_split and tracklet == 1:
        return 0
    return tracklet


def _split_of(tracklet: int) -> str:
    if tracklet == 0:
        return "query"
    if tracklet == 1:
        return "gallery"
    return "train"


def _raw_tracklet(spec: SyntheticSpec, subject: int, tracklet: int) -> np.ndarray:
    blocks = cue_blocks(spec.C)
    data = np.zeros((spec.T, spec.K, spec.C))
    want = lambda kind: spec.cue in (kind, "mixed")

    if want("long_term"):
        offset = _rng(spec.seed, _STREAM_LONG, subject).normal(
            0.0, CUE_AMPLITUDE, size=spec.C // 8)
        data[:, :, blocks["long_term"]] += offset
    if want("short_term"):
        clothes = _clothes_id(spec, tracklet)
        offset = _rng(spec.seed, _STREAM_SHORT, subject, clothes).normal(
            0.0, CUE_AMPLITUDE, size=spec.C // 8)
        data[:, :, blocks["short_term"]] += offset
    if want("temporal"):
        omega = subject_frequency(spec, subject)
        phase = _rng(spec.seed, _STREAM_PHASE, subject, tracklet).uniform(
            0.0, 2.0 * math.pi)
        wave = CUE_AMPLITUDE * np.sin(omega * np.arange(spec.T) + phase)
        data[:, :, blocks["temporal"]] += wave[:, None, None]
    if spec.noise_sigma > 0:
        data += _rng(spec.seed, _STREAM_NOISE, subject, tracklet).normal(
            0.0, spec.noise_sigma, size=data.shape)
    # Quantize to f32 so in-memory values equal the on-disk payload.
    return data.astype(np.float32).astype(np.float64)


def gen_synthetic(spec: SyntheticSpec) -> tuple[Manifest, list[FeatureVolume]]:
    """Generate planted-cue volumes and a manifest with relative paths."""
    spec.validate()
    records: list[ManifestRecord] = []
    volumes: list[FeatureVolume] = []
    tracklet_counter = 0
    for subject in range(spec.num_subjects):
        for tracklet in range(spec.tracklets_per_subject):
            data = _raw_tracklet(spec, subject, tracklet)
            data.flags.writeable = False
            volume = FeatureVolume(
                data=Tensor(data),
                subject_id=subject,
                tracklet_id=tracklet_counter,
                clothes_id=_clothes_id(spec, tracklet),
                camera_id=tracklet,
            )
            records.append(ManifestRecord(
                path=f"s{subject:03d}_t{tracklet:02d}.hfv1",
                subject_id=subject,
                tracklet_id=tracklet_counter,
                clothes_id=volume.clothes_id,
                camera_id=volume.camera_id,
                split=_split_of(tracklet),
            ))
            volumes.append(volume)
            tracklet_counter += 1
    return Manifest(records), volumes


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Materialize a synthetic dataset under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, volumes = gen_synthetic(spec)
    for record, volume in zip(manifest.records, volumes):
        write_volume(volume, out_dir / record.path)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest, manifest_path)
    return manifest_path


def load_split(manifest: Manifest, name: str,
               base_dir: Path | None = None) -> list[FeatureVolume]:
    return [load_record(r, base_dir) for r in manifest.split(name)]
