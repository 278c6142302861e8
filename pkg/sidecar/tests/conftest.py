from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from campvqa_sidecar.jobs import SidecarJob

PREDICT_PROMPTS = {
    "qlt": "Describe the perceptual quality of this video frame. "
    "The expected quality level is not yet determined.",
    "res": "Describe motion-related degradations shown in this residual mosaic.",
    "frag": "Describe localized degradations in this fragment mosaic.",
    "content": "Describe the visual content of this video frame.",
    "mode": "predict",
}


def make_job(
    tmp_path: Path,
    video_id: str,
    rng: np.random.Generator,
    n_sampled: int = 4,
    segment_count: int = 2,
    size: int = 32,
    static: bool = False,
    prompts: dict | None = None,
) -> SidecarJob:
    """Write PNG inputs plus prompts.json and return a validated job."""
    root = tmp_path / video_id
    root.mkdir(parents=True, exist_ok=True)
    frames, fragments, residuals = [], [], []
    base = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    for t in range(n_sampled):
        if static:
            frame = base
            residual = np.zeros_like(base)
        else:
            frame = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            residual = rng.integers(0, 200, (size, size, 3), dtype=np.uint8)
        fragment = frame[: size // 2, : size // 2]
        for name, data, bucket in (
            (f"frame_{t}.png", frame, frames),
            (f"frag_{t}.png", fragment, fragments),
            (f"res_{t}.png", residual, residuals),
        ):
            path = root / name
            Image.fromarray(data).save(path)
            bucket.append(path)
    prompts_path = root / "prompts.json"
    prompts_path.write_text(json.dumps(prompts or PREDICT_PROMPTS, indent=2))

    out_dir = root / "out"
    job = SidecarJob(
        video_id=video_id,
        frames=frames,
        fragments=fragments,
        residuals=residuals,
        segment_count=segment_count,
        prompts_path=prompts_path,
        output_dir=out_dir,
    )
    job.validate()
    return job


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(41)
