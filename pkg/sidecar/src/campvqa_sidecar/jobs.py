"""Job execution: captions plus the four embedding files for one video.

A job names the sampled frames, their paired fragment/residual mosaics, the
prompts file and an output directory. Running it emits captions.json and
img/qlt/art/slowfast/swint .cvqf files laid out per the pipeline's feature
interchange contract, with all writes atomic (temp file then rename).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from campvqa_sidecar import cvqf
from campvqa_sidecar.backends import EncoderBackend
from campvqa_sidecar.errors import JobError

EMPTY_CAPTION_SENTINEL = "no degradation detected"

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_WS = re.compile(r"\s+")


def clean_caption(raw: str, prompt: str | None = None) -> str:
    """Caption cleanup per the pipeline contract: trim, strip a leading
    prompt echo, drop duplicate clauses, sentinel when nothing is left."""
    text = _WS.sub(" ", raw.strip())
    if prompt:
        echo = _WS.sub(" ", prompt.strip())
        if text.startswith(echo):
            text = text[len(echo) :].lstrip()
    if not text:
        return EMPTY_CAPTION_SENTINEL
    seen: set[str] = set()
    kept: list[str] = []
    for clause in _SENTENCE_SPLIT.split(text):
        clause = clause.strip()
        key = clause.rstrip(".!?").strip()
        if not key or key in seen:
            continue
        seen.add(key)
        kept.append(clause)
    return " ".join(kept) if kept else EMPTY_CAPTION_SENTINEL


@dataclass
class SidecarJob:
    video_id: str
    frames: list[Path]  # sampled frames, segment-major order
    fragments: list[Path]  # frame-fragment mosaic per sampled frame
    residuals: list[Path]  # residual mosaic per sampled frame
    segment_count: int
    prompts_path: Path
    output_dir: Path
    device: str = "cpu"
    include_content: bool = False

    @classmethod
    def from_json(cls, path: str | Path) -> "SidecarJob":
        path = Path(path)
        try:
            raw = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise JobError(f"cannot read job file {path}: {exc}") from exc
        try:
            job = cls(
                video_id=raw["video_id"],
                frames=[Path(p) for p in raw["frames"]],
                fragments=[Path(p) for p in raw["fragments"]],
                residuals=[Path(p) for p in raw["residuals"]],
                segment_count=int(raw["segment_count"]),
                prompts_path=Path(raw["prompts"]),
                output_dir=Path(raw["output_dir"]),
                device=raw.get("device") or "cpu",
                include_content=bool(raw.get("include_content", False)),
            )
        except KeyError as exc:
            raise JobError(f"{path}: job missing field {exc}") from exc
        job.validate()
        return job

    def validate(self) -> None:
        n = len(self.frames)
        if n < 1:
            raise JobError(f"{self.video_id}: job lists no sampled frames")
        if len(self.fragments) != n or len(self.residuals) != n:
            raise JobError(
                f"{self.video_id}: {n} frames but {len(self.fragments)} fragments "
                f"and {len(self.residuals)} residuals"
            )
        if self.segment_count < 1 or n % self.segment_count:
            raise JobError(
                f"{self.video_id}: {n} sampled frames not divisible into "
                f"{self.segment_count} segments"
            )
        for p in (*self.frames, *self.fragments, *self.residuals, self.prompts_path):
            if not Path(p).exists():
                raise JobError(f"{self.video_id}: missing input {p}")

    @property
    def frames_per_segment(self) -> int:
        return len(self.frames) // self.segment_count

    def load_prompts(self) -> dict:
        raw = json.loads(self.prompts_path.read_text("utf-8"))
        for key in ("qlt", "res", "frag"):
            if not raw.get(key):
                raise JobError(f"{self.video_id}: prompts file missing {key!r} prompt")
        return raw


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _atomic_json(payload: dict, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def generate_captions(job: SidecarJob, backend: EncoderBackend) -> dict:
    """One cleaned caption triple per sampled frame; returns the captions doc."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    prompts = job.load_prompts()
    entries = []
    for t, (frame_p, frag_p, res_p) in enumerate(
        zip(job.frames, job.fragments, job.residuals)
    ):
        frame, frag, res = _load_image(frame_p), _load_image(frag_p), _load_image(res_p)
        entry = {
            "t": t,
            "qlt": clean_caption(backend.caption(frame, prompts["qlt"]), prompts["qlt"]),
            "res": clean_caption(backend.caption(res, prompts["res"]), prompts["res"]),
            "frag": clean_caption(backend.caption(frag, prompts["frag"]), prompts["frag"]),
            "content": None,
        }
        if job.include_content and prompts.get("content"):
            entry["content"] = clean_caption(
                backend.caption(frame, prompts["content"]), prompts["content"]
            )
        entries.append(entry)
    doc = {"video_id": job.video_id, "entries": entries}
    _atomic_json(doc, job.output_dir / "captions.json")
    return doc


def encode_semantic(job: SidecarJob, backend: EncoderBackend, captions: dict) -> None:
    """Per sampled frame: image embedding, quality-caption embedding, and the
    artifact embedding of the residual+fragment captions joined with '. '."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    img_vecs, qlt_vecs, art_vecs = [], [], []
    for entry, frame_p in zip(captions["entries"], job.frames):
        img_vecs.append(backend.encode_image(_load_image(frame_p)))
        qlt_vecs.append(backend.encode_text(entry["qlt"]))
        art_vecs.append(backend.encode_text(entry["res"] + ". " + entry["frag"]))
    out = job.output_dir
    cvqf.write_cvqf(np.stack(img_vecs), cvqf.MODALITY_IMG, out / "img.cvqf")
    cvqf.write_cvqf(np.stack(qlt_vecs), cvqf.MODALITY_QLT, out / "qlt.cvqf")
    cvqf.write_cvqf(np.stack(art_vecs), cvqf.MODALITY_ART, out / "art.cvqf")
    if job.include_content and captions["entries"][0].get("content"):
        content_vecs = [backend.encode_text(e["content"]) for e in captions["entries"]]
        cvqf.write_cvqf(np.stack(content_vecs), cvqf.MODALITY_CONTENT, out / "content.cvqf")


def _segment_chunks(paths: list[Path], segment_count: int) -> list[list[Path]]:
    per = len(paths) // segment_count
    return [paths[i * per : (i + 1) * per] for i in range(segment_count)]


def extract_temporal(job: SidecarJob, backend: EncoderBackend) -> None:
    """One dual-pathway vector per segment, fed by frames and both mosaics."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    vecs = []
    for frames, frags, residuals in zip(
        _segment_chunks(job.frames, job.segment_count),
        _segment_chunks(job.fragments, job.segment_count),
        _segment_chunks(job.residuals, job.segment_count),
    ):
        images = [_load_image(p) for p in (*frames, *residuals, *frags)]
        vecs.append(backend.temporal_features(images))
    cvqf.write_cvqf(
        np.stack(vecs), cvqf.MODALITY_SLOWFAST, job.output_dir / "slowfast.cvqf",
        reserved=cvqf.INPUT_ALL,
    )


def extract_spatial(job: SidecarJob, backend: EncoderBackend) -> None:
    """One pooled spatial vector per segment, from the frame fragments."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    vecs = []
    for frags in _segment_chunks(job.fragments, job.segment_count):
        vecs.append(backend.spatial_features([_load_image(p) for p in frags]))
    cvqf.write_cvqf(
        np.stack(vecs), cvqf.MODALITY_SWINT, job.output_dir / "swint.cvqf",
        reserved=cvqf.INPUT_FRAME_FRAGMENTS,
    )


def run_job(job: SidecarJob, backend: EncoderBackend) -> dict[str, str]:
    """Full job: captions then the four embedding files. Returns output paths."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    captions = generate_captions(job, backend)
    encode_semantic(job, backend, captions)
    extract_temporal(job, backend)
    extract_spatial(job, backend)
    outputs = {
        "captions": str(job.output_dir / "captions.json"),
        "img": str(job.output_dir / "img.cvqf"),
        "qlt": str(job.output_dir / "qlt.cvqf"),
        "art": str(job.output_dir / "art.cvqf"),
        "slowfast": str(job.output_dir / "slowfast.cvqf"),
        "swint": str(job.output_dir / "swint.cvqf"),
    }
    content_path = job.output_dir / "content.cvqf"
    if content_path.exists():
        outputs["content"] = str(content_path)
    return outputs
