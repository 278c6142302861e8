from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from campvqa.media import FrameBuffer, VideoClip, VideoMetadata


def write_y4m(
    path: Path,
    y_planes: list[np.ndarray],
    u_planes: list[np.ndarray],
    v_planes: list[np.ndarray],
    fps: tuple[int, int] = (30, 1),
    colorspace: str = "C420",
) -> Path:
    """Test fixture: serialize planar YUV into a Y4M stream."""
    h, w = y_planes[0].shape
    header = f"YUV4MPEG2 W{w} H{h} F{fps[0]}:{fps[1]} Ip A1:1 {colorspace}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for y, u, v in zip(y_planes, u_planes, v_planes):
            fh.write(b"FRAME\n")
            fh.write(y.astype(np.uint8).tobytes())
            fh.write(u.astype(np.uint8).tobytes())
            fh.write(v.astype(np.uint8).tobytes())
    return path


def rgb_to_yuv_bt601(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 RGB -> YUV, rounded half away from zero (oracle side)."""
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b

    def q(x: np.ndarray) -> np.ndarray:
        rounded = np.trunc(x + np.copysign(0.5, x))
        return np.clip(rounded, 0, 255).astype(np.uint8)

    return q(y), q(cb), q(cr)


def make_clip(frames: list[np.ndarray], framerate: float = 30.0) -> VideoClip:
    """Wrap raw uint8 (H, W, 3) arrays as a VideoClip without touching disk."""
    h, w = frames[0].shape[:2]
    buffers = [
        FrameBuffer(width=w, height=h, data=np.ascontiguousarray(f, dtype=np.uint8), frame_index=i)
        for i, f in enumerate(frames)
    ]
    meta = VideoMetadata(
        width=w,
        height=h,
        framerate=Fraction(framerate).limit_denominator(1001 * 1000),
        duration=len(frames) / framerate,
        frame_count=len(frames),
        source_id="synthetic",
    )
    return VideoClip(metadata=meta, frames=buffers)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)
