"""Feature and caption interchange formats.

CVQF is the binary embedding format shared with the encoder sidecar:

    magic "CVQF" | version u16=1 | modality u8 | reserved u8 | count u32 |
    dim u32 | count*dim f32 payload | CRC32(payload) u32

all little-endian. The reserved byte is written as 0 by default; the sidecar
may use it to document which inputs fed an extractor, so readers preserve it
instead of rejecting nonzero values.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from campvqa.errors import (
    ConfigError,
    CorruptFile,
    FormatError,
    InvalidData,
    IoError,
)

CVQF_MAGIC = b"CVQF"
CVQF_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")  # magic, version, modality, reserved, count, dim

EMPTY_CAPTION_SENTINEL = "no degradation detected"


class Modality(IntEnum):
    IMG = 0
    QLT = 1
    ART = 2
    SLOWFAST = 3
    SWINT = 4
    CONTENT = 5
    FUSED = 6


@dataclass
class EmbeddingRecord:
    """A modality-tagged sequence of equal-length f32 vectors for one video."""

    video_id: str
    modality: Modality
    vectors: np.ndarray  # float32, shape (count, dim)
    reserved: int = 0

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise InvalidData(
                f"vectors must be a non-empty (count, dim) array, got shape "
                f"{self.vectors.shape}"
            )
        if not np.isfinite(self.vectors).all():
            raise InvalidData("embedding vectors contain NaN or Inf")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def write_cvqf(record: EmbeddingRecord, path: str | Path) -> None:
    """Serialize a record to the CVQF layout with a CRC32 payload footer."""
    payload = np.ascontiguousarray(record.vectors, dtype="<f4").tobytes()
    header = _HEADER.pack(
        CVQF_MAGIC,
        CVQF_VERSION,
        int(record.modality),
        record.reserved & 0xFF,
        record.count,
        record.dim,
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
            fh.write(struct.pack("<I", crc))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_cvqf(path: str | Path, video_id: str | None = None) -> EmbeddingRecord:
    """Parse and CRC-verify a CVQF file.

    Raises FormatError for structural problems, CorruptFile on CRC mismatch
    and InvalidData for non-finite payloads.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(blob) < _HEADER.size + 4:
        raise FormatError(f"{path}: file too short for a CVQF header")
    magic, version, modality, reserved, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != CVQF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CVQF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        modality = Modality(modality)
    except ValueError as exc:
        raise FormatError(f"{path}: unknown modality code {modality}") from exc
    if count < 1 or dim < 1:
        raise FormatError(f"{path}: count and dim must be >= 1, got {count}x{dim}")

    expected = _HEADER.size + count * dim * 4 + 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: size {len(blob)} does not match header "
            f"(count={count}, dim={dim} -> {expected} bytes)"
        )
    payload = blob[_HEADER.size : -4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CorruptFile(f"{path}: CRC mismatch")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    if not np.isfinite(vectors).all():
        raise InvalidData(f"{path}: payload contains NaN or Inf")
    return EmbeddingRecord(
        video_id=video_id if video_id is not None else path.stem,
        modality=modality,
        vectors=vectors.copy(),
        reserved=reserved,
    )


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_WS = re.compile(r"\s+")


def _normalize_ws(text: str) -> str:
    return _WS.sub(" ", text.strip())


def clean_caption(raw: str, prompt: str | None = None) -> str:
    """Minimal deterministic caption cleanup.

    Trims whitespace, drops exact duplicate clauses, strips a leading echo of
    the prompt when one is supplied, and substitutes a fixed sentinel when
    nothing survives. Idempotent.
    """
    text = _normalize_ws(raw)
    if prompt:
        echo = _normalize_ws(prompt)
        if text.startswith(echo):
            text = text[len(echo) :].lstrip()
    if not text:
        return EMPTY_CAPTION_SENTINEL

    clauses = [c.strip() for c in _SENTENCE_SPLIT.split(text) if c.strip()]
    seen: set[str] = set()
    kept: list[str] = []
    for clause in clauses:
        key = clause.rstrip(".!?").strip()
        if not key or key in seen:
            continue
        seen.add(key)
        kept.append(clause)
    if not kept:
        return EMPTY_CAPTION_SENTINEL
    return " ".join(kept)


@dataclass
class CaptionRecord:
    """Per-frame caption triples for one video."""

    video_id: str
    entries: list[dict] = field(default_factory=list)
    # each entry: {"t": int, "qlt": str, "res": str, "frag": str, "content": str|None}

    def __post_init__(self) -> None:
        last_t = None
        for e in self.entries:
            if last_t is not None and e["t"] <= last_t:
                raise InvalidData(f"{self.video_id}: caption entries not strictly increasing in t")
            last_t = e["t"]
            for key in ("qlt", "res", "frag"):
                if not e.get(key):
                    raise InvalidData(f"{self.video_id}: empty {key} caption at t={e['t']}")

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"video_id": self.video_id, "entries": self.entries}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "CaptionRecord":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(video_id=raw["video_id"], entries=raw["entries"])
        except KeyError as exc:
            raise FormatError(f"{path}: captions file missing {exc}") from exc


# Dataset manifest: video_id -> artifact paths and ground truth.
# {"<video_id>": {"features": {"img": path, ...}, "captions": path,
#   "metadata": path, "mos": number | {"<dimension>": number}}}


def load_manifest(path: str | Path) -> dict[str, dict]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: manifest must map video_id to an entry object")
    for vid, entry in raw.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: entry for {vid!r} is not an object")
        features = entry.get("features", {})
        if not isinstance(features, dict):
            raise ConfigError(f"{path}: features for {vid!r} must map modality to path")
    return raw


def save_manifest(manifest: dict[str, dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
