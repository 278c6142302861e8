"""Writer for the CVQF embedding interchange format.

Layout (little-endian): magic "CVQF", version u16=1, modality u8,
reserved u8, count u32, dim u32, count*dim f32 payload, CRC32(payload) u32.
The reserved byte documents which visual inputs fed the extractor
(see INPUT_* constants); 0 means plain frames.

This is an independent implementation of the wire format: the sidecar talks
to the main pipeline through files, not through its code.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CVQF"
VERSION = 1

MODALITY_IMG = 0
MODALITY_QLT = 1
MODALITY_ART = 2
MODALITY_SLOWFAST = 3
MODALITY_SWINT = 4
MODALITY_CONTENT = 5

# reserved-byte codes: which images fed the extractor
INPUT_FRAMES = 0
INPUT_FRAME_FRAGMENTS = 1
INPUT_RESIDUAL_FRAGMENTS = 2
INPUT_ALL = 3

_HEADER = struct.Struct("<4sHBBII")


def write_cvqf(vectors: np.ndarray, modality: int, path: str | Path, reserved: int = 0) -> None:
    """Atomically write an embedding record (temp file, then rename)."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
        raise ValueError(f"vectors must be non-empty (count, dim), got {vectors.shape}")
    if not np.isfinite(vectors).all():
        raise ValueError("vectors contain NaN or Inf")
    payload = vectors.tobytes()
    blob = (
        _HEADER.pack(MAGIC, VERSION, modality, reserved & 0xFF, *vectors.shape)
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
