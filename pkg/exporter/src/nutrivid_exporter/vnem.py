"""Writer for the VNEM embedding interchange format.

This is the sole contract with the downstream toolkit, reproduced here
so the exporter has no code dependency on it. Layout (little-endian):
magic "VNEM", u16 version, u32 dim, u32 num_frames, f32 fps, u16 video
id length, UTF-8 video id, row-major f32 payload, CRC-32 of the payload.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

VNEM_MAGIC = b"VNEM"
VNEM_VERSION = 1

_HEADER = struct.Struct("<4sHIIfH")


def write_vnem(video_id: str, data: np.ndarray, fps: float, path: str | Path) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"embedding matrix must be non-empty 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("embedding payload contains NaN/Inf")
    vid_bytes = video_id.encode("utf-8")
    payload = data.tobytes(order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(VNEM_MAGIC, VNEM_VERSION, data.shape[1], data.shape[0],
                              float(fps), len(vid_bytes)))
        fh.write(vid_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
