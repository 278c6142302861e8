"""Frame difference fragmentation.

Computes inter-frame residuals, ranks non-overlapping patches by residual
intensity, and assembles the top-K patches into paired frame/residual mosaics
of a fixed target size. Patch placement keeps raster order so the mosaics
preserve relative spatial structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from campvqa.errors import ConfigError, InconsistentFrames, InputTooSmall, InternalError
from campvqa.media import FrameBuffer, VideoClip


@dataclass(frozen=True)
class FdfConfig:
    patch_size: int = 16  # p
    target_size: int = 224  # s, mosaic edge length

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.target_size < 1:
            raise ConfigError("patch_size and target_size must be >= 1")
        if self.target_size % self.patch_size:
            raise ConfigError(
                f"target_size {self.target_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def patches_per_fragment(self) -> int:
        """K: how many patches tile one s x s mosaic."""
        return (self.target_size // self.patch_size) ** 2


@dataclass
class ResidualFrame:
    """Per-pixel, per-channel absolute difference of two frames."""

    width: int
    height: int
    data: np.ndarray  # uint8, shape (height, width, 3)


@dataclass(frozen=True)
class PatchScore:
    patch_index: int  # raster order over the patch grid
    row: int  # grid row
    col: int  # grid column
    delta: int  # sum of absolute differences over the patch, all channels


@dataclass
class FragmentPair:
    frame_fragment: np.ndarray  # uint8 (s, s, 3), patches from the current frame
    residual_fragment: np.ndarray  # uint8 (s, s, 3), patches from the residual
    provenance: list[PatchScore]  # placement order, one entry per mosaic cell
    frame_index: int = 0  # t of the current frame


def compute_residual(prev: FrameBuffer, curr: FrameBuffer) -> ResidualFrame:
    """Absolute per-pixel, per-channel difference |curr - prev|."""
    if (prev.width, prev.height) != (curr.width, curr.height):
        raise InconsistentFrames(
            f"frame dims differ: {prev.width}x{prev.height} vs {curr.width}x{curr.height}"
        )
    a = curr.data.astype(np.int16)
    b = prev.data.astype(np.int16)
    diff = np.abs(a - b).astype(np.uint8)
    return ResidualFrame(width=curr.width, height=curr.height, data=diff)


def patch_intensities(residual: ResidualFrame, cfg: FdfConfig) -> list[PatchScore]:
    """Score every non-overlapping p x p patch by its summed residual.

    The grid covers the largest patch-aligned region; right/bottom remainders
    are cropped. Scores come back in raster order.
    """
    p = cfg.patch_size
    rows, cols = residual.height // p, residual.width // p
    if rows < 1 or cols < 1:
        raise InputTooSmall(
            f"residual {residual.width}x{residual.height} smaller than one {p}x{p} patch"
        )
    cropped = residual.data[: rows * p, : cols * p, :].astype(np.int64)
    # (rows, cols) block sums over p*p pixels and all channels
    blocks = cropped.reshape(rows, p, cols, p, 3).sum(axis=(1, 3, 4))
    scores = [
        PatchScore(patch_index=r * cols + c, row=r, col=c, delta=int(blocks[r, c]))
        for r in range(rows)
        for c in range(cols)
    ]
    return scores


def select_top_k(scores: list[PatchScore], cfg: FdfConfig) -> list[PatchScore]:
    """Pick the K highest-delta patches; ties go to the lower patch_index.

    The result is re-sorted by ascending patch_index so downstream mosaic
    assembly preserves raster order among the selected patches.
    """
    k = cfg.patches_per_fragment
    if len(scores) < k:
        raise InputTooSmall(
            f"{len(scores)} patches available but K={k}; "
            f"frames must cover at least {cfg.target_size}x{cfg.target_size} pixels"
        )
    ranked = sorted(scores, key=lambda s: (-s.delta, s.patch_index))
    return sorted(ranked[:k], key=lambda s: s.patch_index)


def assemble_fragments(
    frame: FrameBuffer,
    residual: ResidualFrame,
    selected: list[PatchScore],
    cfg: FdfConfig,
) -> FragmentPair:
    """Paste the selected patches into paired s x s mosaics.

    Mosaic cell m (raster order) holds the residual block at selected[m]'s
    coordinates; the frame mosaic takes the block from the same position in
    the current frame, so the pair stays spatially aligned.
    """
    p, s = cfg.patch_size, cfg.target_size
    k = cfg.patches_per_fragment
    if len(selected) != k:
        raise InternalError(f"expected {k} selected patches, got {len(selected)}")
    cells_per_row = s // p
    frame_mosaic = np.empty((s, s, 3), dtype=np.uint8)
    residual_mosaic = np.empty((s, s, 3), dtype=np.uint8)
    for m, score in enumerate(selected):
        y0, x0 = score.row * p, score.col * p
        if y0 + p > frame.height or x0 + p > frame.width:
            raise InternalError(
                f"patch {score.patch_index} at ({y0},{x0}) exceeds frame "
                f"{frame.width}x{frame.height}"
            )
        my, mx = (m // cells_per_row) * p, (m % cells_per_row) * p
        frame_mosaic[my : my + p, mx : mx + p] = frame.data[y0 : y0 + p, x0 : x0 + p]
        residual_mosaic[my : my + p, mx : mx + p] = residual.data[y0 : y0 + p, x0 : x0 + p]
    return FragmentPair(
        frame_fragment=frame_mosaic,
        residual_fragment=residual_mosaic,
        provenance=list(selected),
        frame_index=frame.frame_index,
    )


def fragment_video(clip: VideoClip, cfg: FdfConfig) -> list[FragmentPair]:
    """One FragmentPair per frame t = 1..n-1 (frame 0 has no predecessor)."""
    if clip.metadata.frame_count < 2:
        raise InputTooSmall("fragmentation needs at least 2 frames")
    if (
        clip.metadata.width < cfg.target_size
        or clip.metadata.height < cfg.target_size
    ):
        raise InputTooSmall(
            f"frames are {clip.metadata.width}x{clip.metadata.height}, "
            f"smaller than the {cfg.target_size}x{cfg.target_size} target"
        )
    pairs: list[FragmentPair] = []
    for t in range(1, clip.metadata.frame_count):
        prev, curr = clip.frames[t - 1], clip.frames[t]
        residual = compute_residual(prev, curr)
        scores = patch_intensities(residual, cfg)
        selected = select_top_k(scores, cfg)
        pairs.append(assemble_fragments(curr, residual, selected, cfg))
    return pairs


def provenance_dump(pair: FragmentPair) -> dict:
    """JSON-friendly provenance view (CLI debug dumps)."""
    return {
        "frame_index": pair.frame_index,
        "patches": [
            {"patch_index": s.patch_index, "row": s.row, "col": s.col, "delta": s.delta}
            for s in pair.provenance
        ],
    }
