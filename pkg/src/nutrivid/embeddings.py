"""Per-video frame embeddings and the VNEM binary interchange format.

Embeddings are the frozen-backbone boundary: everything upstream
(decoding, preprocessing, backbone inference) happens elsewhere and
lands here as a T x D float32 matrix at a fixed frame rate.

VNEM layout (all integers little-endian):

    magic      4 bytes   b"VNEM"
    version    u16       currently 1
    dim        u32       embedding dimension D
    num_frames u32       frame count T
    fps        f32       frames per second
    vid_len    u16       length of the UTF-8 video id
    video_id   bytes
    payload    T*D little-endian f32, row-major
    crc32      u32       zlib CRC-32 of the payload bytes

The format is self-describing and stream-verifiable; any language with
a CRC-32 routine can produce or consume it.
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

VNEM_MAGIC = b"VNEM"
VNEM_VERSION = 1

#: Embedding widths of the supported pretrained backbones; other positive
#: dims are accepted with a warning (synthetic benchmarks use small dims).
STANDARD_DIMS = (2048, 768, 1024)

_HEADER = struct.Struct("<4sHIIfH")


class EmbeddingError(Exception):
    """Base class for embedding storage errors."""


class FormatError(EmbeddingError):
    pass


class TruncatedFile(EmbeddingError):
    pass


class NonFiniteValue(EmbeddingError):
    pass


class EmptyTimestampList(EmbeddingError):
    pass


@dataclass
class EmbeddingSequence:
    """Frame embeddings for one video: ``data[t]`` is the frame at t/fps."""

    video_id: str
    data: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"embedding data must be non-empty, got shape {self.data.shape}")
        if self.fps <= 0:
            raise ValueError(f"fps must be > 0, got {self.fps}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"video '{self.video_id}': embedding payload contains NaN/Inf")
        if self.dim not in STANDARD_DIMS:
            warnings.warn(
                f"embedding dim {self.dim} is not a standard backbone width {STANDARD_DIMS}",
                stacklevel=2,
            )

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[0])


def write_embeddings(seq: EmbeddingSequence, path: str | Path) -> None:
    if not np.all(np.isfinite(seq.data)):
        raise NonFiniteValue(f"video '{seq.video_id}': refusing to write NaN/Inf payload")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vid_bytes = seq.video_id.encode("utf-8")
    if len(vid_bytes) > 0xFFFF:
        raise ValueError("video_id too long for the format header")
    payload = np.asarray(seq.data, dtype="<f4").tobytes(order="C")
    header = _HEADER.pack(VNEM_MAGIC, VNEM_VERSION, seq.dim, seq.num_frames, seq.fps, len(vid_bytes))
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(vid_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_embeddings(path: str | Path) -> EmbeddingSequence:
    """Read a VNEM file, verifying magic, version, size, and checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: file shorter than the fixed header")
    magic, version, dim, num_frames, fps, vid_len = _HEADER.unpack_from(raw, 0)
    if magic != VNEM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VNEM_MAGIC!r}")
    if version != VNEM_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    offset = _HEADER.size
    if len(raw) < offset + vid_len:
        raise TruncatedFile(f"{path}: truncated inside video_id")
    video_id = raw[offset:offset + vid_len].decode("utf-8")
    offset += vid_len
    payload_len = num_frames * dim * 4
    if len(raw) < offset + payload_len + 4:
        raise TruncatedFile(
            f"{path}: expected {payload_len} payload bytes plus checksum, "
            f"found {len(raw) - offset}"
        )
    payload = raw[offset:offset + payload_len]
    (stored_crc,) = struct.unpack_from("<I", raw, offset + payload_len)
    if zlib.crc32(payload) != stored_crc:
        raise FormatError(f"{path}: payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(num_frames, dim).copy()
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{path}: payload contains NaN/Inf")
    return EmbeddingSequence(video_id=video_id, data=data, fps=float(fps))


def frame_index_at(seq: EmbeddingSequence, ts: float) -> int:
    """Frame index for a timestamp: floor(ts * fps), clamped to the sequence."""
    idx = int(math.floor(ts * seq.fps))
    return min(max(idx, 0), seq.num_frames - 1)


def slice_at(seq: EmbeddingSequence, timestamps: Sequence[float]) -> np.ndarray:
    """Rows at the given timestamps as an N x D matrix.

    Timestamps that land on the same frame are de-duplicated (first
    occurrence order), so the same evidence is never counted twice.
    """
    if len(timestamps) == 0:
        raise EmptyTimestampList("slice_at requires at least one timestamp")
    indices: list[int] = []
    seen: set[int] = set()
    for ts in timestamps:
        idx = frame_index_at(seq, ts)
        if idx not in seen:
            seen.add(idx)
            indices.append(idx)
    return seq.data[indices].copy()
