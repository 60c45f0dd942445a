"""Embed final-dish images and 1 fps video frames with a frozen backbone.

Inputs are already-decoded images (a directory of frames or a frame-list
file mapping timestamps to image paths); undistortion, cropping, and
frame extraction belong to the upstream step. The random-D backbone
embeds seeded random projections of raw pixels so integration tests
never need model weights; the real backbones load a fine-tuned
checkpoint and run frozen.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .vnem import write_vnem

#: Embedding widths of the supported pretrained backbones.
BACKBONE_DIMS = {
    "resnet101-2048": 2048,
    "vitb16-768": 768,
    "vitl16-1024": 1024,
}

_RANDOM_TAG = re.compile(r"^random-(\d+)$")

#: Pixel grid the random projection reads; images are resized to this.
RANDOM_MODE_SIZE = 32
RANDOM_MODE_SEED = 1337

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class ExportError(Exception):
    pass


class BadCheckpoint(ExportError):
    pass


class UnreadableFrame(ExportError):
    pass


class DimMismatch(ExportError):
    pass


def backbone_dim(backbone_tag: str) -> int:
    """Embedding width declared by a backbone tag."""
    if backbone_tag in BACKBONE_DIMS:
        return BACKBONE_DIMS[backbone_tag]
    match = _RANDOM_TAG.match(backbone_tag)
    if match:
        dim = int(match.group(1))
        if dim < 1:
            raise ValueError(f"random backbone dim must be >= 1: '{backbone_tag}'")
        return dim
    raise ValueError(f"unknown backbone tag '{backbone_tag}'")


@dataclass(frozen=True)
class ExportJob:
    """One video's frames to embed into one VNEM file."""

    input_path: Path          # directory of frames, or a frame-list file
    backbone_tag: str
    output_path: Path
    video_id: str | None = None
    checkpoint: Path | None = None
    fps: float = 1.0
    dim: int | None = None    # optional cross-check against the tag

    def __post_init__(self):
        object.__setattr__(self, "input_path", Path(self.input_path))
        object.__setattr__(self, "output_path", Path(self.output_path))
        if self.checkpoint is not None:
            object.__setattr__(self, "checkpoint", Path(self.checkpoint))
        declared = backbone_dim(self.backbone_tag)
        if self.dim is not None and self.dim != declared:
            raise DimMismatch(
                f"job declares dim {self.dim} but backbone '{self.backbone_tag}' "
                f"produces {declared}")

    @property
    def resolved_video_id(self) -> str:
        return self.video_id or self.input_path.stem


def read_frame_list(path: Path) -> list[tuple[float, Path]]:
    """Parse a frame-list file: one `ts_seconds<TAB>image_path` per line."""
    frames = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ExportError(f"{path}:{line_no}: expected 'ts<TAB>image_path'")
        frames.append((float(parts[0]), (path.parent / parts[1]).resolve()))
    if not frames:
        raise ExportError(f"{path}: frame list is empty")
    frames.sort(key=lambda item: item[0])
    return frames


def collect_frames(job: ExportJob) -> list[tuple[float, Path]]:
    """(timestamp, image path) pairs from a directory or a frame-list file.

    Directory frames are ordered by filename and assigned timestamps
    i / fps; a frame list supplies timestamps explicitly.
    """
    if job.input_path.is_dir():
        paths = sorted(p for p in job.input_path.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise ExportError(f"no images under {job.input_path}")
        return [(i / job.fps, p) for i, p in enumerate(paths)]
    if job.input_path.is_file():
        return read_frame_list(job.input_path)
    raise ExportError(f"input not found: {job.input_path}")


def _load_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableFrame(f"cannot read frame {path}: {exc}") from exc


def _random_projection_embed(paths: list[Path], dim: int) -> np.ndarray:
    """Seeded random projection of raw pixel values.

    Deterministic in (image bytes, dim): the projection matrix depends
    only on a fixed seed and the declared width.
    """
    rng = np.random.default_rng(RANDOM_MODE_SEED + dim)
    n_pixels = RANDOM_MODE_SIZE * RANDOM_MODE_SIZE * 3
    projection = rng.normal(size=(n_pixels, dim)).astype(np.float64) / np.sqrt(n_pixels)
    rows = []
    for path in paths:
        img = _load_image(path).resize((RANDOM_MODE_SIZE, RANDOM_MODE_SIZE), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float64).reshape(-1) / 255.0
        rows.append(pixels @ projection)
    return np.stack(rows).astype(np.float32)


def _load_backbone(tag: str, checkpoint: Path | None):
    import torch
    from torchvision import models

    state = None
    if checkpoint is not None:
        try:
            state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise BadCheckpoint(f"cannot load checkpoint {checkpoint}: {exc}") from exc

    torch.manual_seed(0)  # untrained fallback stays run-to-run deterministic
    if tag == "resnet101-2048":
        net = models.resnet101(weights=None)
        net.fc = torch.nn.Identity()
    elif tag == "vitb16-768":
        net = models.vit_b_16(weights=None)
        net.heads = torch.nn.Identity()
    else:
        net = models.vit_l_16(weights=None)
        net.heads = torch.nn.Identity()

    if state is not None:
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        try:
            missing, unexpected = net.load_state_dict(state, strict=False)
        except Exception as exc:
            raise BadCheckpoint(f"checkpoint does not fit backbone '{tag}': {exc}") from exc
        if missing:
            raise BadCheckpoint(f"checkpoint misses {len(missing)} tensors for '{tag}'")
    net.eval()
    return net


def _backbone_embed(paths: list[Path], tag: str, checkpoint: Path | None,
                    batch_size: int = 16) -> np.ndarray:
    import torch

    net = _load_backbone(tag, checkpoint)
    mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
    std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
    rows = []
    with torch.no_grad():
        for start in range(0, len(paths), batch_size):
            batch = []
            for path in paths[start:start + batch_size]:
                img = _load_image(path).resize((256, 256), Image.BILINEAR)
                pixels = np.asarray(img, dtype=np.float32) / 255.0
                crop = pixels[16:240, 16:240]  # center 224x224
                batch.append((crop - mean) / std)
            tensor = torch.from_numpy(np.stack(batch).transpose(0, 3, 1, 2))
            out = net(tensor).numpy()
            rows.append(out)
    data = np.concatenate(rows, axis=0).astype(np.float32)
    declared = backbone_dim(tag)
    if data.shape[1] != declared:
        raise DimMismatch(f"backbone '{tag}' produced width {data.shape[1]}, "
                          f"declared {declared}")
    return data


def export(job: ExportJob) -> Path:
    """Embed every frame and write the VNEM file plus a metadata sidecar.

    Deterministic given fixed inputs (and checkpoint, for real
    backbones): repeated runs produce byte-identical files.
    """
    frames = collect_frames(job)
    paths = [p for _, p in frames]
    dim = backbone_dim(job.backbone_tag)
    if _RANDOM_TAG.match(job.backbone_tag):
        data = _random_projection_embed(paths, dim)
        preprocessing = (f"RGB, bilinear resize to {RANDOM_MODE_SIZE}x{RANDOM_MODE_SIZE}, "
                         f"pixels/255, seeded gaussian projection (seed "
                         f"{RANDOM_MODE_SEED + dim})")
    else:
        data = _backbone_embed(paths, job.backbone_tag, job.checkpoint)
        preprocessing = ("RGB, bilinear resize to 256, center crop 224, "
                         "imagenet mean/std normalization")

    write_vnem(job.resolved_video_id, data, job.fps, job.output_path)

    sidecar = {
        "video_id": job.resolved_video_id,
        "backbone_tag": job.backbone_tag,
        "checkpoint": str(job.checkpoint) if job.checkpoint else None,
        "dim": dim,
        "num_frames": len(frames),
        "fps": job.fps,
        "preprocessing": preprocessing,
        "frame_ts": [ts for ts, _ in frames],
    }
    meta_path = job.output_path.with_suffix(job.output_path.suffix + ".meta.json")
    meta_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n",
                         encoding="utf-8")
    return job.output_path
