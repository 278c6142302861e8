"""Segment planning, pooling and multimodal feature fusion.

Videos are cut into fixed-length segments at a per-second stride; semantic
embeddings are pooled inside each segment (over half-rate sampled frames),
temporal and spatial vectors arrive one per segment, and all three components
are averaged across segments before the final concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from campvqa.errors import DimError, InputTooSmall
from campvqa.store import EmbeddingRecord


@dataclass(frozen=True)
class Segment:
    start: int  # first frame index
    padded_count: int  # frames past the end, filled by replicating the last frame


@dataclass(frozen=True)
class SegmentPlan:
    frame_count: int
    stride: int  # r
    length: int  # T
    segments: tuple[Segment, ...]

    @property
    def segment_count(self) -> int:
        return len(self.segments)

    def frame_indices(self, segment: Segment) -> list[int]:
        """Concrete frame indices, clamped so padding repeats the last frame."""
        last = self.frame_count - 1
        return [min(t, last) for t in range(segment.start, segment.start + self.length)]


@dataclass
class FusedFeature:
    """Per-video fused representation and its component layout."""

    f_se: np.ndarray  # semantic, d_i + 2*d_t
    f_tm: np.ndarray  # temporal, d_s + d_f
    f_sv: np.ndarray  # spatial
    f_multimodal: np.ndarray  # [f_se || f_tm || f_sv]
    dims: dict[str, int]

    def __post_init__(self) -> None:
        expected = len(self.f_se) + len(self.f_tm) + len(self.f_sv)
        if len(self.f_multimodal) != expected:
            raise DimError(
                f"fused length {len(self.f_multimodal)} != component sum {expected}"
            )
        if not np.isfinite(self.f_multimodal).all():
            raise DimError("fused feature contains NaN or Inf")


def plan_segments(frame_count: int, stride: int, length: int) -> SegmentPlan:
    """Segments start at i*stride for i = 0..ceil(frame_count/stride)-1.

    Every segment is `length` frames after padding; padded_count records how
    many of those are replicas of the final frame.
    """
    if frame_count < 1 or stride < 1 or length < 1:
        raise InputTooSmall("frame_count, stride and length must all be >= 1")
    m = -(-frame_count // stride)  # ceil
    segments = []
    for i in range(m):
        start = i * stride
        padded = max(0, start + length - frame_count)
        segments.append(Segment(start=start, padded_count=min(padded, length)))
    return SegmentPlan(
        frame_count=frame_count, stride=stride, length=length, segments=tuple(segments)
    )


def sample_half_rate(segment_length: int) -> list[int]:
    """Indices of every second frame within a segment: 0, 2, 4, ..."""
    if segment_length < 1:
        raise InputTooSmall("segment must contain at least one frame")
    return list(range(0, segment_length, 2))


def gap_pool(vectors: np.ndarray) -> np.ndarray:
    """Global average pooling: elementwise mean over a (count, dim) stack."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[0] < 1:
        raise InputTooSmall("cannot pool an empty vector sequence")
    return arr.mean(axis=0)


def fuse_semantic(e_img: np.ndarray, e_qlt: np.ndarray, e_art: np.ndarray) -> np.ndarray:
    """[img || qlt || art]; the two text embeddings must share a dimension."""
    e_img, e_qlt, e_art = (np.asarray(v, dtype=np.float64) for v in (e_img, e_qlt, e_art))
    if e_qlt.shape != e_art.shape:
        raise DimError(
            f"text embedding dims differ: qlt {e_qlt.shape} vs art {e_art.shape}"
        )
    if e_img.ndim != 1 or e_qlt.ndim != 1:
        raise DimError("semantic embeddings must be 1-D vectors")
    return np.concatenate([e_img, e_qlt, e_art])


def fuse_temporal(z_slow: np.ndarray, z_fast: np.ndarray) -> np.ndarray:
    """[slow || fast] pathway concatenation."""
    z_slow, z_fast = np.asarray(z_slow, np.float64), np.asarray(z_fast, np.float64)
    if z_slow.ndim != 1 or z_fast.ndim != 1:
        raise DimError("temporal embeddings must be 1-D vectors")
    return np.concatenate([z_slow, z_fast])


def aggregate_video(
    per_segment: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> FusedFeature:
    """Mean each component over segments, then concatenate the three means."""
    if not per_segment:
        raise InputTooSmall("no segments to aggregate")
    se_list, tm_list, sv_list = zip(*per_segment)
    for name, group in (("semantic", se_list), ("temporal", tm_list), ("spatial", sv_list)):
        dims = {len(v) for v in group}
        if len(dims) != 1:
            raise DimError(f"ragged {name} dims across segments: {sorted(dims)}")
    f_se = gap_pool(np.stack(se_list))
    f_tm = gap_pool(np.stack(tm_list))
    f_sv = gap_pool(np.stack(sv_list))
    fused = np.concatenate([f_se, f_tm, f_sv])
    return FusedFeature(
        f_se=f_se,
        f_tm=f_tm,
        f_sv=f_sv,
        f_multimodal=fused,
        dims={"se": len(f_se), "tm": len(f_tm), "sv": len(f_sv)},
    )


def sampled_frames_per_segment(length: int) -> int:
    return len(sample_half_rate(length))


def fuse_video(
    img: EmbeddingRecord,
    qlt: EmbeddingRecord,
    art: EmbeddingRecord,
    slowfast: EmbeddingRecord,
    swint: EmbeddingRecord,
    plan: SegmentPlan,
) -> FusedFeature:
    """Fuse one video's embedding records against its segment plan.

    Semantic records carry one vector per sampled frame, grouped by segment
    (all segments sample the same count because padding equalizes lengths);
    temporal and spatial records carry one vector per segment.
    """
    m = plan.segment_count
    per_seg = sampled_frames_per_segment(plan.length)
    expected = m * per_seg
    for rec, name in ((img, "img"), (qlt, "qlt"), (art, "art")):
        if rec.count != expected:
            raise DimError(
                f"{name} record has {rec.count} vectors, plan expects "
                f"{m} segments x {per_seg} sampled frames = {expected}"
            )
    if qlt.dim != art.dim:
        raise DimError(f"text embedding dims differ: qlt {qlt.dim} vs art {art.dim}")
    for rec, name in ((slowfast, "slowfast"), (swint, "swint")):
        if rec.count != m:
            raise DimError(f"{name} record has {rec.count} vectors, plan expects {m}")

    per_segment = []
    for i in range(m):
        sl = slice(i * per_seg, (i + 1) * per_seg)
        f_se = fuse_semantic(
            gap_pool(img.vectors[sl]),
            gap_pool(qlt.vectors[sl]),
            gap_pool(art.vectors[sl]),
        )
        f_tm = np.asarray(slowfast.vectors[i], dtype=np.float64)
        f_sv = np.asarray(swint.vectors[i], dtype=np.float64)
        per_segment.append((f_se, f_tm, f_sv))
    return aggregate_video(per_segment)
