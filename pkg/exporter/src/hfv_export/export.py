"""Export pipeline: frames -> padded pixels -> encoder taps -> HFV1 files.

Input layout: every immediate subdirectory of the input directory is one
tracklet holding frame images. Directory names of the form ``s<N>_t<M>``
supply subject and tracklet ids; tracklet 0 of a subject lands in the query
split, tracklet 1 in the gallery split, the rest in train. Output volumes
are little-endian HFV1 (magic, version 1, T/K/C dims, f32 payload) listed in
``manifest.jsonl``, one JSON record per tracklet.
"""

from __future__ import annotations

import argparse
import json
import re
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .encoder import (
    IMAGE_SIZE,
    NUM_TOKENS,
    PIXEL_MEAN,
    PIXEL_STD,
    WIDTH,
    build_encoder,
)

HFV1_MAGIC = b"HFV1"
HFV1_HEADER = struct.Struct("<4sIIIIB3x")
HFV1_DTYPE_F32 = 0

DEFAULT_LAYERS = (6, 12, 18, 24)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")

_TRACKLET_NAME = re.compile(r"s(\d+)_t(\d+)$")


class ExportError(Exception):
    """Any contract violation during export."""


@dataclass
class ExportJob:
    """One export run over a directory of tracklet frame directories."""

    input_dir: Path
    out_dir: Path
    frames: int
    layers: tuple[int, ...] = DEFAULT_LAYERS
    seed: int = 0
    weights: str | None = None
    device: str = "cpu"

    def validate(self) -> None:
        if self.frames < 1:
            raise ExportError("frames must be >= 1")
        if len(self.layers) != 4:
            raise ExportError(f"exactly 4 tap layers required, "
                              f"got {list(self.layers)}")
        bad = [i for i in self.layers if not 1 <= i <= 24]
        if bad:
            raise ExportError(f"tap layers {bad} outside [1, 24]")
        if not self.input_dir.is_dir():
            raise ExportError(f"input directory not found: {self.input_dir}")


def pad_and_resize(image: Image.Image) -> Image.Image:
    """Zero-pad to a centered square, then resize to the encoder input size.

    The shorter axis is padded equally on both sides (the extra pixel of an
    odd difference goes to the trailing side), so the subject's aspect ratio
    survives the resize.
    """
    w, h = image.size
    if w == 0 or h == 0:
        raise ExportError("empty image")
    side = max(w, h)
    if (w, h) != (side, side):
        square = Image.new("RGB", (side, side), (0, 0, 0))
        square.paste(image.convert("RGB"), ((side - w) // 2, (side - h) // 2))
        image = square
    else:
        image = image.convert("RGB")
    return image.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)


def sample_frame_paths(tracklet_dir: Path, frames: int) -> list[Path]:
    """Uniformly spaced selection of ``frames`` images, sorted by name."""
    paths = sorted(p for p in tracklet_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(paths) < frames:
        raise ExportError(f"{tracklet_dir.name}: {len(paths)} frame(s), "
                          f"need {frames}")
    indices = np.round(np.linspace(0, len(paths) - 1, frames)).astype(int)
    return [paths[i] for i in indices]


def frames_to_tensor(paths: list[Path]) -> torch.Tensor:
    """Load, pad, resize, scale to [0, 1], and channel-normalize frames."""
    mean = torch.tensor(PIXEL_MEAN).view(3, 1, 1)
    std = torch.tensor(PIXEL_STD).view(3, 1, 1)
    stack = []
    for path in paths:
        try:
            with Image.open(path) as img:
                pixels = np.asarray(pad_and_resize(img), dtype=np.float32)
        except OSError as exc:
            raise ExportError(f"unreadable image {path}: {exc}") from exc
        tensor = torch.from_numpy(pixels).permute(2, 0, 1) / 255.0
        stack.append((tensor - mean) / std)
    return torch.stack(stack)


def write_hfv1(volume: np.ndarray, path: Path) -> None:
    t, k, c = volume.shape
    with open(path, "wb") as fh:
        fh.write(HFV1_HEADER.pack(HFV1_MAGIC, 1, t, k, c, HFV1_DTYPE_F32))
        fh.write(volume.astype("<f4").tobytes())


def tracklet_metadata(name: str, index: int) -> tuple[int, int]:
    match = _TRACKLET_NAME.search(name)
    if match:
        return int(match.group(1)), int(match.group(2))
    # Unrecognized names still export; each becomes its own subject.
    return index, 0


def split_for(tracklet: int) -> str:
    return {0: "query", 1: "gallery"}.get(tracklet, "train")


def export(job: ExportJob) -> Path:
    """Run the job; returns the manifest path."""
    job.validate()
    tracklet_dirs = sorted(p for p in job.input_dir.iterdir() if p.is_dir())
    if not tracklet_dirs:
        raise ExportError(f"no tracklet directories under {job.input_dir}")
    encoder = build_encoder(job.layers, job.seed, job.weights)
    encoder.to(job.device)

    job.out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index, tracklet_dir in enumerate(tracklet_dirs):
        paths = sample_frame_paths(tracklet_dir, job.frames)
        pixels = frames_to_tensor(paths).to(job.device)
        with torch.no_grad():
            features = encoder(pixels).cpu().to(torch.float32).numpy()
        if features.shape[1:] != (NUM_TOKENS, 4 * WIDTH):
            raise ExportError(f"unexpected feature shape {features.shape}")
        out_name = f"{tracklet_dir.name}.hfv1"
        write_hfv1(features, job.out_dir / out_name)
        subject, tracklet = tracklet_metadata(tracklet_dir.name, index)
        records.append({
            "path": out_name,
            "subject_id": subject,
            "tracklet_id": index,
            "clothes_id": tracklet,
            "camera_id": tracklet,
            "split": split_for(tracklet),
        })

    manifest_path = job.out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for row in records:
            fh.write(json.dumps(row) + "\n")
    return manifest_path


def parse_layers(text: str) -> tuple[int, ...]:
    try:
        layers = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ExportError(f"cannot parse layer list {text!r}") from exc
    return layers


def run(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(
        prog="hfv-export",
        description="Export encoder features of tracklet frames to HFV1.")
    parser.add_argument("--input", required=True,
                        help="directory of tracklet frame directories")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--frames", type=int, default=8,
                        help="frames sampled uniformly per tracklet")
    parser.add_argument("--layers", default="6,12,18,24",
                        help="comma-separated encoder blocks to tap (4)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weights", help="encoder state-dict path")
    parser.add_argument("--device", default="cpu")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        job = ExportJob(input_dir=Path(args.input), out_dir=Path(args.out),
                        frames=args.frames, layers=parse_layers(args.layers),
                        seed=args.seed, weights=args.weights,
                        device=args.device)
        manifest_path = export(job)
    except ExportError as exc:
        print(json.dumps({"error": "ExportError", "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"manifest": str(manifest_path)}))
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
