"""Whole-system drive: fragment -> sidecar (stub) -> fuse -> train -> eval.

This is the only place the two packages meet in one process; everything they
exchange still goes through files.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from campvqa.cli import main as pipeline
from campvqa.store import load_manifest, read_cvqf
from campvqa_sidecar.cli import main as sidecar


def _write_y4m(path, rng, n_frames=6, size=24, brightness=128):
    header = f"YUV4MPEG2 W{size} H{size} F30:1 Ip A1:1 C420\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for _ in range(n_frames):
            fh.write(b"FRAME\n")
            luma = rng.integers(0, 80, (size, size), dtype=np.uint8) + brightness // 2
            fh.write(luma.tobytes())
            fh.write(np.full((size // 2, size // 2), 128, np.uint8).tobytes() * 2)
    return path


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(17)
    config = {
        "fdf": {"patch_size": 8, "target_size": 16},
        "segment": {"stride": None, "length": 32},
        "train": {
            "batch_size": 8, "epochs": 10, "lr": 0.05, "weight_decay": 1e-4,
            "patience": 10, "hidden": [8, 4], "seed": 0,
        },
        "paths": {
            "dataset_root": str(tmp_path / "dataset"),
            "feature_dir": str(tmp_path / "features"),
            "output_dir": str(tmp_path / "out"),
        },
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    (tmp_path / "dataset").mkdir()

    videos, mos = [], {}
    for i in range(12):
        vid = f"clip{i:02d}"
        videos.append(str(_write_y4m(tmp_path / f"{vid}.y4m", rng, brightness=40 + 14 * i)))
        mos[vid] = 1.0 + 4.0 * i / 11.0
    (tmp_path / "dataset" / "manifest.json").write_text(
        json.dumps({vid: {"mos": score} for vid, score in mos.items()})
    )
    return tmp_path, config_path, videos, mos


def test_full_system_through_files(workspace):
    tmp_path, config_path, videos, mos = workspace
    base = ["--config", str(config_path)]

    assert pipeline([*base, "fragment", *videos]) == 0
    out_manifest = load_manifest(tmp_path / "out" / "manifest.json")
    assert set(out_manifest) == set(mos)

    # the sidecar consumes each job file the fragment step emitted
    for vid in sorted(mos):
        job_path = out_manifest[vid]["job"]
        job = json.loads(open(job_path).read())
        assert job["segment_count"] >= 1
        assert len(job["frames"]) % job["segment_count"] == 0
        assert sidecar(["--job", job_path, "--backend", "stub"]) == 0
        for name in ("img", "qlt", "art", "slowfast", "swint"):
            record = read_cvqf(tmp_path / "features" / vid / f"{name}.cvqf")
            expected = len(job["frames"]) if name in ("img", "qlt", "art") else job[
                "segment_count"
            ]
            assert record.count == expected

    assert pipeline([*base, "fuse"]) == 0
    feature_manifest = load_manifest(tmp_path / "features" / "manifest.json")
    fused_dims = {read_cvqf(feature_manifest[vid]["fused"]).dim for vid in mos}
    assert len(fused_dims) == 1

    assert pipeline([*base, "--seed", "0", "train"]) == 0
    assert pipeline([*base, "predict"]) == 0
    scores = (tmp_path / "out" / "scores.csv").read_text().strip().splitlines()
    assert len(scores) == 1 + len(mos)

    assert pipeline([*base, "--seed", "0", "eval", "--repeats", "2"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["runs"]) == 2
    assert -1.0 <= report["median"]["srcc"] <= 1.0
