"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Tolerances are fixed here, not tuned at runtime.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines during a green run.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from campvqa.errors import CampVqaError
from campvqa.evaluate import krcc, plcc, run_protocol, srcc
from campvqa.fdf import (
    FdfConfig,
    PatchScore,
    assemble_fragments,
    compute_residual,
    fragment_video,
    patch_intensities,
    select_top_k,
)
from campvqa.media import FrameBuffer
from campvqa.regressor import (
    MlpParams,
    TrainConfig,
    backward,
    loss_composite,
    loss_precision,
    loss_ranking,
    mlp_forward,
    swa_average,
    train,
)
from campvqa.store import EmbeddingRecord, Modality, read_cvqf, write_cvqf

from conftest import make_clip


def _criterion(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] {name}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _frame(data: np.ndarray, index: int = 0) -> FrameBuffer:
    h, w = data.shape[:2]
    return FrameBuffer(width=w, height=h, data=data.astype(np.uint8), frame_index=index)


def test_fdf_oracle_equivalence():
    """100 random frame pairs: exact match with scalar-loop and sort oracles."""
    rng = np.random.default_rng(2024)
    cfg = FdfConfig(patch_size=8, target_size=32)  # K = 16
    start = time.monotonic()
    for _ in range(100):
        h = int(rng.integers(32, 65))
        w = int(rng.integers(32, 65))
        prev = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        curr = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        residual = compute_residual(_frame(prev), _frame(curr))

        scores = patch_intensities(residual, cfg)
        # naive scalar-loop oracle
        p = cfg.patch_size
        expected = []
        for r in range(h // p):
            for c in range(w // p):
                total = 0
                for i in range(r * p, (r + 1) * p):
                    for j in range(c * p, (c + 1) * p):
                        for k in range(3):
                            total += abs(int(curr[i, j, k]) - int(prev[i, j, k]))
                expected.append(total)
        assert [s.delta for s in scores] == expected

        selected = select_top_k(scores, cfg)
        # full-sort oracle with the same tie rule
        oracle = sorted(scores, key=lambda s: (-s.delta, s.patch_index))[
            : cfg.patches_per_fragment
        ]
        assert sorted(s.patch_index for s in selected) == sorted(
            s.patch_index for s in oracle
        )
    elapsed = time.monotonic() - start
    _criterion(
        "FDF oracle equivalence (100 random pairs, exact)",
        elapsed < 5.0,
        f"{elapsed:.2f}s < 5s",
    )


def test_k_arithmetic():
    """K = s^2/p^2 fragments per pair; mosaics exactly s x s."""
    rng = np.random.default_rng(7)
    for s, p in ((64, 8), (128, 16), (224, 16)):
        cfg = FdfConfig(patch_size=p, target_size=s)
        expected_k = (s * s) // (p * p)
        assert cfg.patches_per_fragment == expected_k
        frames = [rng.integers(0, 256, (s, s, 3), dtype=np.uint8) for _ in range(2)]
        pairs = fragment_video(make_clip(frames), cfg)
        assert len(pairs) == 1
        pair = pairs[0]
        assert len(pair.provenance) == expected_k
        assert pair.frame_fragment.shape == (s, s, 3)
        assert pair.residual_fragment.shape == (s, s, 3)
    assert FdfConfig(patch_size=16, target_size=224).patches_per_fragment == 196
    _criterion("K arithmetic over (64,8), (128,16), (224,16); K(224,16) == 196", True)


def test_loss_identities():
    ok = loss_precision([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    ok &= abs(loss_ranking([1.0, 0.0], [0.0, 1.0]) - 1.0) <= 1e-12
    ok &= abs(loss_ranking([0.0, 10.0], [1.0, 2.0]) - 0.0) <= 1e-12
    ok &= abs(loss_composite([1.0, 0.0], [0.0, 1.0], 0.6, 1.0) - 1.6) <= 1e-12
    _criterion("loss identities and hand-computed cases at 1e-12", ok)


def test_gradient_checks():
    """>= 20 random configs, elementwise rel err <= 1e-4, dropout off, BN frozen."""
    start = time.monotonic()
    h = 1e-5
    worst_overall = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d_in = int(rng.integers(2, 6))
        hidden = (int(rng.integers(2, 7)), int(rng.integers(2, 6)))
        params = MlpParams.init(d_in, hidden=hidden, rng=rng, dropout_rate=0.0)
        params.rm1[...] = rng.normal(size=params.rm1.shape)
        params.rv1[...] = rng.uniform(0.5, 2.0, size=params.rv1.shape)
        params.rm2[...] = rng.normal(size=params.rm2.shape)
        params.rv2[...] = rng.uniform(0.5, 2.0, size=params.rv2.shape)
        lam1, lam2 = float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.5))

        x = rng.normal(size=(6, d_in))
        y = rng.normal(size=6)
        _, grads = backward(x, y, params, lam1, lam2, training=True, bn_frozen=True)
        analytic = grads.vector()

        base = params.trainable_vector()
        for i in range(base.size):
            probe_params = params.copy()
            vec = base.copy()
            vec[i] = base[i] + h
            probe_params.set_trainable_vector(vec)
            up = lam1 * loss_precision(
                mlp_forward(x, probe_params, mode="eval"), y
            ) + lam2 * loss_ranking(mlp_forward(x, probe_params, mode="eval"), y)
            vec[i] = base[i] - h
            probe_params.set_trainable_vector(vec)
            down = lam1 * loss_precision(
                mlp_forward(x, probe_params, mode="eval"), y
            ) + lam2 * loss_ranking(mlp_forward(x, probe_params, mode="eval"), y)
            numeric = (up - down) / (2.0 * h)
            scale = max(abs(analytic[i]), abs(numeric), 1e-3)
            rel = abs(analytic[i] - numeric) / scale
            worst_overall = max(worst_overall, rel)
        assert worst_overall <= 1e-4, f"seed {seed}: rel err {worst_overall:.3e}"
    elapsed = time.monotonic() - start
    _criterion(
        "gradient checks: 20 random configs, elementwise rel err <= 1e-4",
        elapsed < 30.0 and worst_overall <= 1e-4,
        f"worst {worst_overall:.2e}, {elapsed:.1f}s < 30s",
    )


def test_swa_exactness():
    rng = np.random.default_rng(5)
    snapshots = [rng.normal(size=257) for _ in range(13)]
    averaged = swa_average(snapshots)
    total = snapshots[0].copy()
    for snap in snapshots[1:]:
        total = total + snap
    exact = (averaged == total / len(snapshots)).all()

    # and through an actual training run
    x = rng.normal(size=(60, 5))
    y = x @ rng.normal(size=5)
    config = TrainConfig(
        batch_size=16, epochs=8, lr=0.02, seed=1, hidden=(6, 4),
        swa_start_fraction=0.5, patience=8,
    )
    idx = np.arange(60)
    report = train(x, y, config, split=(idx[:50], idx[50:]))
    mean = report.swa_snapshots[0].copy()
    for snap in report.swa_snapshots[1:]:
        mean = mean + snap
    mean = mean / len(report.swa_snapshots)
    exact &= (swa_average(report.swa_snapshots) == mean).all()
    _criterion("SWA average equals arithmetic mean of snapshots (f64 equality)", bool(exact))


def _pearson_oracle(a, b) -> float:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def _rank_oracle(values) -> list[float]:
    return [
        sum(1 for u in values if u < v) + (sum(1 for u in values if u == v) + 1) / 2.0
        for v in values
    ]


def _kendall_oracle(a, b) -> float:
    n = len(a)
    net = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0:
                ties_a += 1
            if db == 0:
                ties_b += 1
            if da != 0 and db != 0:
                net += 1 if (da > 0) == (db > 0) else -1
    n0 = n * (n - 1) // 2
    return net / math.sqrt((n0 - ties_a) * (n0 - ties_b))


def test_metric_oracles_and_invariances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(60):
        n = int(rng.integers(3, 51))
        pred = rng.normal(size=n)
        mos = rng.normal(size=n)
        worst = max(worst, abs(plcc(pred, mos) - _pearson_oracle(pred.tolist(), mos.tolist())))
        worst = max(
            worst,
            abs(
                srcc(pred, mos)
                - _pearson_oracle(_rank_oracle(pred.tolist()), _rank_oracle(mos.tolist()))
            ),
        )
        worst = max(worst, abs(krcc(pred, mos) - _kendall_oracle(pred.tolist(), mos.tolist())))
    assert worst <= 1e-10

    # 1000 random invariance cases: 500 rank-invariance + 500 affine-invariance
    inv_worst = 0.0
    for _ in range(500):
        n = int(rng.integers(3, 40))
        pred = rng.normal(size=n)
        mos = rng.normal(size=n)
        base = srcc(pred, mos)
        transformed = srcc(np.exp(pred * 0.5), mos)  # strictly increasing map
        inv_worst = max(inv_worst, abs(base - transformed))
    for _ in range(500):
        n = int(rng.integers(3, 40))
        pred = rng.normal(size=n)
        mos = rng.normal(size=n)
        a = float(rng.uniform(0.1, 10.0))
        b = float(rng.normal() * 5)
        inv_worst = max(inv_worst, abs(plcc(a * pred + b, mos) - plcc(pred, mos)))
    _criterion(
        "metric oracles at 1e-10 plus 1000 invariance cases",
        worst <= 1e-10 and inv_worst <= 1e-10,
        f"oracle err {worst:.1e}, invariance err {inv_worst:.1e}",
    )


def test_synthetic_end_to_end_protocol():
    """1000 synthetic fused features with a planted monotone map; 21 repeats."""
    rng = np.random.default_rng(123)
    n, d = 1000, 64
    features = rng.normal(size=(n, d)).astype(np.float32)
    w = rng.normal(size=d)
    mos = 4.0 / (1.0 + np.exp(-(features @ w) / np.sqrt(d))) + 1.0
    mos += 0.01 * rng.normal(size=n)

    config = TrainConfig(
        batch_size=64, epochs=100, lr=0.1, weight_decay=5e-4,
        patience=20, hidden=(128, 64),
    )
    start = time.monotonic()
    report = run_protocol(features, mos, config=config, repeats=21)
    elapsed = time.monotonic() - start
    _criterion(
        "synthetic end-to-end: median SRCC/PLCC >= 0.95 within 10 min",
        elapsed < 600.0 and report.median_srcc >= 0.95 and report.median_plcc >= 0.95,
        f"SRCC {report.median_srcc:.4f}, PLCC {report.median_plcc:.4f}, {elapsed:.0f}s",
    )


def test_format_round_trip_and_fuzzing(tmp_path):
    rng = np.random.default_rng(99)
    path = tmp_path / "probe.cvqf"
    ok = True
    for i in range(1000):
        count = int(rng.integers(1, 5))
        dim = int(rng.integers(1, 9))
        vectors = rng.normal(size=(count, dim)).astype(np.float32)
        modality = Modality(int(rng.integers(0, 7)))
        write_cvqf(EmbeddingRecord(video_id=f"v{i}", modality=modality, vectors=vectors), path)
        back = read_cvqf(path)
        ok &= back.vectors.tobytes() == vectors.tobytes()
        ok &= back.modality == modality and back.dim == dim and back.count == count
    assert ok

    # fuzzed headers must raise pipeline errors, never crash
    reference = path.read_bytes()
    attempts = 0
    for _ in range(300):
        blob = bytearray(reference)
        for _ in range(int(rng.integers(1, 4))):
            blob[int(rng.integers(0, min(16, len(blob))))] = int(rng.integers(0, 256))
        path.write_bytes(bytes(blob))
        attempts += 1
        try:
            read_cvqf(path)
        except CampVqaError:
            pass
    for _ in range(200):
        path.write_bytes(rng.bytes(int(rng.integers(0, 64))))
        attempts += 1
        try:
            read_cvqf(path)
        except CampVqaError:
            pass
    _criterion(
        "CVQF: 1000 bit-exact round trips; fuzzed headers rejected without panic",
        ok,
        f"{attempts} fuzz attempts handled",
    )


def test_full_pipeline_determinism(tmp_path, rng):
    """Two identical seeded pipeline runs: byte-identical scores.csv/report.json."""
    from test_cli import _fake_sidecar_outputs, _make_video, _pipeline_config
    from campvqa.cli import main
    from campvqa.store import load_manifest

    config_path = _pipeline_config(tmp_path)
    videos, mos = [], {}
    for i in range(12):
        vid = f"clip{i:02d}"
        videos.append(str(_make_video(tmp_path / f"{vid}.y4m", rng)))
        mos[vid] = 1.0 + 4.0 * i / 11.0
    with open(tmp_path / "dataset" / "manifest.json", "w") as fh:
        json.dump({vid: {"mos": score} for vid, score in mos.items()}, fh)

    assert main(["--config", str(config_path), "fragment", *videos]) == 0
    _fake_sidecar_outputs(tmp_path, sorted(mos), mos, np.random.default_rng(55))
    assert main(["--config", str(config_path), "fuse"]) == 0

    outputs = []
    for _ in range(2):
        assert main(["--config", str(config_path), "--seed", "9", "train"]) == 0
        assert main(["--config", str(config_path), "predict"]) == 0
        assert main(["--config", str(config_path), "--seed", "0", "eval", "--repeats", "3"]) == 0
        outputs.append(
            (
                (tmp_path / "out" / "scores.csv").read_bytes(),
                (tmp_path / "out" / "report.json").read_bytes(),
            )
        )
    identical = outputs[0] == outputs[1]
    _criterion("determinism: byte-identical scores.csv and report.json", identical)
