"""Video ingest: Y4M streams and PNG frame directories.

Both loaders produce fully decoded 8-bit RGB frames so the rest of the
pipeline never touches a codec. YUV input is converted with the BT.601
full-range matrix, rounded half away from zero and clamped to [0, 255].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from campvqa.errors import ConfigError, InconsistentFrames, ParseError, TruncatedStream

Y4M_MAGIC = b"YUV4MPEG2"

# Chroma layouts we decode: plane size divisors (horizontal, vertical).
_CHROMA_SUBSAMPLING = {
    "420": (2, 2),
    "420jpeg": (2, 2),
    "420mpeg2": (2, 2),
    "420paldv": (2, 2),
    "444": (1, 1),
}


@dataclass
class FrameBuffer:
    """One decoded frame: row-major interleaved 8-bit RGB."""

    width: int
    height: int
    data: np.ndarray  # uint8, shape (height, width, 3)
    frame_index: int = 0
    channels: int = 3

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InconsistentFrames(f"frame dims must be >= 1, got {self.width}x{self.height}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise InconsistentFrames(
                f"frame data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )


@dataclass
class VideoMetadata:
    width: int
    height: int
    framerate: Fraction
    duration: float
    frame_count: int
    source_id: str
    bitrate: float | None = None  # bits/second; raw sources have none

    def __post_init__(self) -> None:
        if self.framerate <= 0:
            raise ConfigError(f"framerate must be > 0, got {self.framerate}")
        if self.frame_count < 1:
            raise ConfigError(f"frame_count must be >= 1, got {self.frame_count}")


@dataclass
class VideoClip:
    metadata: VideoMetadata
    frames: list[FrameBuffer] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.frames) != self.metadata.frame_count:
            raise InconsistentFrames(
                f"{len(self.frames)} frames but metadata says {self.metadata.frame_count}"
            )
        for f in self.frames:
            if (f.width, f.height) != (self.metadata.width, self.metadata.height):
                raise InconsistentFrames(
                    f"frame {f.frame_index} is {f.width}x{f.height}, "
                    f"clip is {self.metadata.width}x{self.metadata.height}"
                )


def yuv_to_rgb_bt601(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Convert full-size planes (uint8, same shape) to interleaved RGB.

    BT.601 full range; rounding is half away from zero, then clamp to [0, 255].
    """
    yf = y.astype(np.float64)
    uf = u.astype(np.float64) - 128.0
    vf = v.astype(np.float64) - 128.0
    rgb = np.stack(
        [
            yf + 1.402 * vf,
            yf - 0.344136 * uf - 0.714136 * vf,
            yf + 1.772 * uf,
        ],
        axis=-1,
    )
    rounded = np.trunc(rgb + np.copysign(0.5, rgb))
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _upsample_chroma(plane: np.ndarray, sub_h: int, sub_v: int) -> np.ndarray:
    """Nearest-neighbour replication back to luma size."""
    if sub_h == 1 and sub_v == 1:
        return plane
    return np.repeat(np.repeat(plane, sub_v, axis=0), sub_h, axis=1)


def _parse_y4m_header(line: bytes, path: Path) -> tuple[int, int, Fraction, str]:
    fields = line.decode("ascii", errors="replace").split(" ")
    if fields[0].encode() != Y4M_MAGIC:
        raise ParseError(f"{path}: not a YUV4MPEG2 stream")
    width = height = None
    framerate: Fraction | None = None
    colorspace = "420"
    for tok in fields[1:]:
        if not tok:
            continue
        tag, val = tok[0], tok[1:]
        try:
            if tag == "W":
                width = int(val)
            elif tag == "H":
                height = int(val)
            elif tag == "F":
                num, den = val.split(":")
                framerate = Fraction(int(num), int(den))
            elif tag == "C":
                colorspace = val
        except (ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"{path}: bad header token {tok!r}") from exc
        # I (interlace), A (aspect), X (extension) tokens are ignored
    if width is None or height is None or framerate is None:
        raise ParseError(f"{path}: header missing W, H or F")
    if width < 1 or height < 1 or framerate <= 0:
        raise ParseError(f"{path}: non-positive dimension or framerate")
    if colorspace not in _CHROMA_SUBSAMPLING:
        raise ParseError(f"{path}: unsupported colorspace C{colorspace}")
    sub_h, sub_v = _CHROMA_SUBSAMPLING[colorspace]
    if width % sub_h or height % sub_v:
        raise ParseError(
            f"{path}: C{colorspace} requires dimensions divisible by "
            f"{sub_h}x{sub_v}, got {width}x{height}"
        )
    return width, height, framerate, colorspace


def load_y4m(path: str | Path) -> VideoClip:
    """Decode a Y4M stream (4:2:0 or 4:4:4) into an RGB VideoClip.

    Raises ParseError for malformed headers and TruncatedStream when a frame
    payload ends early.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        if not header.endswith(b"\n"):
            raise ParseError(f"{path}: unterminated stream header")
        width, height, framerate, colorspace = _parse_y4m_header(header.rstrip(b"\n"), path)

        sub_h, sub_v = _CHROMA_SUBSAMPLING[colorspace]
        y_size = width * height
        c_size = (width // sub_h) * (height // sub_v)

        frames: list[FrameBuffer] = []
        while True:
            marker = fh.readline()
            if marker == b"":
                break
            if not marker.startswith(b"FRAME"):
                raise ParseError(f"{path}: expected FRAME marker, got {marker[:16]!r}")
            payload = fh.read(y_size + 2 * c_size)
            if len(payload) != y_size + 2 * c_size:
                raise TruncatedStream(
                    f"{path}: frame {len(frames)} truncated "
                    f"({len(payload)} of {y_size + 2 * c_size} bytes)"
                )
            y = np.frombuffer(payload, np.uint8, y_size).reshape(height, width)
            u = np.frombuffer(payload, np.uint8, c_size, y_size)
            v = np.frombuffer(payload, np.uint8, c_size, y_size + c_size)
            u = _upsample_chroma(u.reshape(height // sub_v, width // sub_h), sub_h, sub_v)
            v = _upsample_chroma(v.reshape(height // sub_v, width // sub_h), sub_h, sub_v)
            rgb = yuv_to_rgb_bt601(y, u, v)
            frames.append(FrameBuffer(width, height, rgb, frame_index=len(frames)))

    if not frames:
        raise TruncatedStream(f"{path}: stream contains no frames")

    fps = float(framerate)
    meta = VideoMetadata(
        width=width,
        height=height,
        framerate=framerate,
        duration=len(frames) / fps,
        frame_count=len(frames),
        source_id=path.stem,
        bitrate=None,
    )
    return VideoClip(metadata=meta, frames=frames)


def load_frame_dir(path: str | Path, manifest: str | Path) -> VideoClip:
    """Load lexicographically ordered PNG frames plus a metadata manifest.

    The manifest JSON must supply ``framerate``; ``bitrate`` and ``source_id``
    are optional ({"framerate": number, "bitrate": number|null,
    "source_id": string}).
    """
    path = Path(path)
    with open(manifest, "r", encoding="utf-8") as fh:
        try:
            info = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{manifest}: invalid JSON: {exc}") from exc
    if "framerate" not in info:
        raise ConfigError(f"{manifest}: manifest missing required field 'framerate'")
    framerate = Fraction(info["framerate"]).limit_denominator(1001 * 1000)
    bitrate = info.get("bitrate")
    source_id = info.get("source_id", path.name)

    png_paths = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not png_paths:
        raise ConfigError(f"{path}: no PNG frames found")

    frames: list[FrameBuffer] = []
    for idx, png in enumerate(png_paths):
        with Image.open(png) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        h, w = rgb.shape[:2]
        if frames and (w, h) != (frames[0].width, frames[0].height):
            raise InconsistentFrames(
                f"{png.name} is {w}x{h}, first frame is {frames[0].width}x{frames[0].height}"
            )
        frames.append(FrameBuffer(w, h, rgb, frame_index=idx))

    meta = VideoMetadata(
        width=frames[0].width,
        height=frames[0].height,
        framerate=framerate,
        duration=len(frames) / float(framerate),
        frame_count=len(frames),
        source_id=source_id,
        bitrate=float(bitrate) if bitrate is not None else None,
    )
    return VideoClip(metadata=meta, frames=frames)
