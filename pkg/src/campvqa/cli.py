"""Batch driver: fragment, fuse, train, predict and eval subcommands.

Configuration is a JSON file; any field can be overridden through
environment variables named CAMPVQA_<SECTION>__<KEY> (double underscore
between path components, values parsed as JSON when possible). Exit codes:
0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from campvqa import evaluate, fdf, fusion, media, prompts, regressor, store
from campvqa.errors import CampVqaError, ConfigError

ENV_PREFIX = "CAMPVQA_"

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2


@dataclass
class PipelineConfig:
    fdf: fdf.FdfConfig = field(default_factory=fdf.FdfConfig)
    segment_stride: int | None = None  # None: round(framerate) per video
    segment_length: int = 32
    thresholds_path: str | None = None
    template_dir: str | None = None
    train: regressor.TrainConfig | None = None
    mos_scale: tuple[float, float] = (1.0, 5.0)
    dataset_root: str = "."
    feature_dir: str = "features"
    output_dir: str = "out"

    @classmethod
    def from_file(cls, path: str | Path | None) -> "PipelineConfig":
        raw: dict = {}
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        raw = _apply_env_overrides(raw)
        return cls._from_dict(raw)

    @classmethod
    def _from_dict(cls, raw: dict) -> "PipelineConfig":
        cfg = cls()
        fdf_raw = raw.get("fdf", {})
        cfg.fdf = fdf.FdfConfig(
            patch_size=int(fdf_raw.get("patch_size", 16)),
            target_size=int(fdf_raw.get("target_size", 224)),
        )
        seg = raw.get("segment", {})
        stride = seg.get("stride")
        cfg.segment_stride = int(stride) if stride is not None else None
        cfg.segment_length = int(seg.get("length", 32))
        cfg.thresholds_path = raw.get("thresholds")
        cfg.template_dir = raw.get("templates")
        if "train" in raw:
            tr = dict(raw["train"])
            if "hidden" in tr:
                tr["hidden"] = tuple(tr["hidden"])
            cfg.train = regressor.TrainConfig(**tr)
        scale = raw.get("mos_scale", [1.0, 5.0])
        cfg.mos_scale = (float(scale[0]), float(scale[1]))
        paths = raw.get("paths", {})
        cfg.dataset_root = paths.get("dataset_root", ".")
        cfg.feature_dir = paths.get("feature_dir", "features")
        cfg.output_dir = paths.get("output_dir", "out")
        return cfg

    def validate_paths(self, *names: str) -> None:
        for name in names:
            path = Path(getattr(self, name))
            if not path.exists():
                raise ConfigError(f"configured path does not exist: {name}={path}")


def _apply_env_overrides(raw: dict) -> dict:
    for key, value in sorted(os.environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not parts:
            continue
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"env override {key} conflicts with non-object config")
        node[parts[-1]] = parsed
    return raw


def _load_clip(video: str) -> media.VideoClip:
    path = Path(video)
    if path.is_dir():
        return media.load_frame_dir(path, path / "manifest.json")
    if path.suffix.lower() == ".y4m":
        return media.load_y4m(path)
    raise ConfigError(f"unsupported video input: {video} (expected .y4m or a PNG directory)")


def _metadata_dict(meta: media.VideoMetadata) -> dict:
    return {
        "width": meta.width,
        "height": meta.height,
        "framerate": float(meta.framerate),
        "bitrate": meta.bitrate,
        "duration": meta.duration,
        "frame_count": meta.frame_count,
        "source_id": meta.source_id,
    }


def _metadata_from_dict(raw: dict) -> media.VideoMetadata:
    from fractions import Fraction

    return media.VideoMetadata(
        width=int(raw["width"]),
        height=int(raw["height"]),
        framerate=Fraction(raw["framerate"]).limit_denominator(1001 * 1000),
        duration=float(raw["duration"]),
        frame_count=int(raw["frame_count"]),
        source_id=raw.get("source_id", "unknown"),
        bitrate=raw.get("bitrate"),
    )


def _fragment_one(
    video: str, cfg: PipelineConfig, thresholds: prompts.HintThresholds,
    templates: dict[str, str], mode: str, mos_lookup: dict[str, float],
) -> tuple[str, dict]:
    clip = _load_clip(video)
    vid = clip.metadata.source_id
    out_dir = Path(cfg.output_dir) / vid
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = fdf.fragment_video(clip, cfg.fdf)
    provenance = []
    for pair in pairs:
        t = pair.frame_index
        Image.fromarray(pair.frame_fragment).save(out_dir / f"{vid}_{t}_frag.png")
        Image.fromarray(pair.residual_fragment).save(out_dir / f"{vid}_{t}_res.png")
        provenance.append(fdf.provenance_dump(pair))
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2)
        fh.write("\n")

    hints = prompts.classify_metadata(clip.metadata, thresholds)
    level = None
    if mode == prompts.TRAIN:
        if vid not in mos_lookup:
            raise ConfigError(f"{vid}: train-mode prompts need a MOS in the dataset manifest")
        level = prompts.mos_to_level(mos_lookup[vid], cfg.mos_scale, thresholds.levels)
    prompt_set = prompts.build_prompts(hints, mode, level=level, templates=templates)
    prompts.write_prompts_json(prompt_set, out_dir / "prompts.json")

    with open(out_dir / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(_metadata_dict(clip.metadata), fh, indent=2)
        fh.write("\n")

    job_path = _write_sidecar_job(clip, cfg, out_dir)

    entry = {
        "fragments": str(out_dir),
        "prompts": str(out_dir / "prompts.json"),
        "metadata": str(out_dir / "metadata.json"),
        "job": str(job_path),
        "frame_count": clip.metadata.frame_count,
    }
    if vid in mos_lookup:
        entry["mos"] = mos_lookup[vid]
    return vid, entry


def _write_sidecar_job(clip: media.VideoClip, cfg: PipelineConfig, out_dir: Path) -> Path:
    """Emit sampled frames and the encoder job description for one video.

    Sampled frames follow the segment plan at half rate; padding repeats the
    last frame, so paths may repeat. Frame 0 has no residual pair, so its
    mosaic slots point at the t=1 pair.
    """
    vid = clip.metadata.source_id
    stride = cfg.segment_stride or max(1, round(float(clip.metadata.framerate)))
    plan = fusion.plan_segments(clip.metadata.frame_count, stride, cfg.segment_length)

    frames, fragments, residuals = [], [], []
    saved: set[int] = set()
    for segment in plan.segments:
        indices = plan.frame_indices(segment)
        for offset in fusion.sample_half_rate(len(indices)):
            t = indices[offset]
            frame_path = out_dir / f"{vid}_{t}_frame.png"
            if t not in saved:
                Image.fromarray(clip.frames[t].data).save(frame_path)
                saved.add(t)
            pair_t = max(t, 1)  # frame 0 yields no fragment pair
            frames.append(str(frame_path))
            fragments.append(str(out_dir / f"{vid}_{pair_t}_frag.png"))
            residuals.append(str(out_dir / f"{vid}_{pair_t}_res.png"))

    job = {
        "video_id": vid,
        "frames": frames,
        "fragments": fragments,
        "residuals": residuals,
        "segment_count": plan.segment_count,
        "prompts": str(out_dir / "prompts.json"),
        "output_dir": str(Path(cfg.feature_dir) / vid),
        "device": None,
    }
    job_path = out_dir / "job.json"
    with open(job_path, "w", encoding="utf-8") as fh:
        json.dump(job, fh, indent=2)
        fh.write("\n")
    return job_path


def cmd_fragment(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    thresholds = (
        prompts.HintThresholds.from_json(cfg.thresholds_path)
        if cfg.thresholds_path
        else prompts.HintThresholds.default()
    )
    templates = prompts.load_templates(cfg.template_dir)
    mos_lookup: dict[str, float] = {}
    dataset_manifest = Path(cfg.dataset_root) / "manifest.json"
    if dataset_manifest.exists():
        for vid, entry in store.load_manifest(dataset_manifest).items():
            mos = entry.get("mos")
            if isinstance(mos, (int, float)):
                mos_lookup[vid] = float(mos)

    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    manifest_path = Path(cfg.output_dir) / "manifest.json"
    manifest = store.load_manifest(manifest_path) if manifest_path.exists() else {}

    failures = 0
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {
            video: pool.submit(
                _fragment_one, video, cfg, thresholds, templates, args.prompt_mode, mos_lookup
            )
            for video in args.videos
        }
    for video in args.videos:
        try:
            vid, entry = futures[video].result()
            manifest[vid] = {**manifest.get(vid, {}), **entry}
            print(f"{vid}: ok")
        except CampVqaError as exc:
            failures += 1
            print(f"{video}: error: {exc}", file=sys.stderr)

    store.save_manifest(manifest, manifest_path)
    return EXIT_DATA_ERROR if failures else EXIT_OK


_SEMANTIC = ("img", "qlt", "art")
_PER_SEGMENT = ("slowfast", "swint")


def _fuse_one(vid: str, entry: dict, cfg: PipelineConfig) -> tuple[str, str]:
    features = entry.get("features", {})
    records = {}
    for modality in (*_SEMANTIC, *_PER_SEGMENT):
        if modality not in features:
            raise ConfigError(f"{vid}: manifest missing {modality} feature path")
        records[modality] = store.read_cvqf(features[modality], video_id=vid)

    with open(entry["metadata"], "r", encoding="utf-8") as fh:
        meta = _metadata_from_dict(json.load(fh))
    stride = cfg.segment_stride or max(1, round(float(meta.framerate)))
    plan = fusion.plan_segments(meta.frame_count, stride, cfg.segment_length)

    fused = fusion.fuse_video(
        records["img"], records["qlt"], records["art"],
        records["slowfast"], records["swint"], plan,
    )
    out_path = Path(cfg.feature_dir) / f"{vid}_fused.cvqf"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    store.write_cvqf(
        store.EmbeddingRecord(
            video_id=vid,
            modality=store.Modality.FUSED,
            vectors=fused.f_multimodal[None, :].astype(np.float32),
        ),
        out_path,
    )
    return vid, str(out_path)


def _collect_feature_manifest(cfg: PipelineConfig) -> dict[str, dict]:
    """Build the feature manifest from sidecar outputs laid out by convention.

    Used when the sidecar was driven from the job files the fragment step
    wrote: features live at <feature_dir>/<video_id>/<modality>.cvqf and
    metadata/MOS come from the fragment manifest.
    """
    out_manifest = store.load_manifest(Path(cfg.output_dir) / "manifest.json")
    manifest: dict[str, dict] = {}
    for vid, entry in out_manifest.items():
        video_dir = Path(cfg.feature_dir) / vid
        features = {
            mod: str(video_dir / f"{mod}.cvqf")
            for mod in (*_SEMANTIC, *_PER_SEGMENT)
            if (video_dir / f"{mod}.cvqf").exists()
        }
        row = {"features": features, "metadata": entry["metadata"]}
        if (video_dir / "captions.json").exists():
            row["captions"] = str(video_dir / "captions.json")
        if "mos" in entry:
            row["mos"] = entry["mos"]
        manifest[vid] = row
    return manifest


def cmd_fuse(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest_path = Path(cfg.feature_dir) / "manifest.json"
    if manifest_path.exists():
        manifest = store.load_manifest(manifest_path)
    else:
        manifest = _collect_feature_manifest(cfg)
        manifest_path.parent.mkdir(parents=True, exist_ok=True)

    failures = 0
    fused_dims: set[int] = set()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {vid: pool.submit(_fuse_one, vid, entry, cfg) for vid, entry in manifest.items()}
    for vid in sorted(futures):
        try:
            _, path = futures[vid].result()
            manifest[vid]["fused"] = path
            fused_dims.add(store.read_cvqf(path).dim)
            print(f"{vid}: fused -> {path}")
        except (CampVqaError, OSError, KeyError) as exc:
            failures += 1
            print(f"{vid}: error: {exc}", file=sys.stderr)

    if len(fused_dims) > 1:
        print(f"inconsistent fused dims across dataset: {sorted(fused_dims)}", file=sys.stderr)
        failures += 1
    store.save_manifest(manifest, manifest_path)
    return EXIT_DATA_ERROR if failures else EXIT_OK


def _load_fused_matrix(
    manifest: dict[str, dict], need_mos: bool = True
) -> tuple[list[str], np.ndarray, np.ndarray]:
    vids = sorted(manifest)
    rows, scores = [], []
    dim = None
    for vid in vids:
        entry = manifest[vid]
        if "fused" not in entry:
            raise ConfigError(f"{vid}: no fused feature path in manifest (run fuse first)")
        rec = store.read_cvqf(entry["fused"], video_id=vid)
        vec = rec.vectors.reshape(-1)
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ConfigError(f"{vid}: fused dim {vec.size} != dataset dim {dim}")
        rows.append(vec.astype(np.float64))
        if need_mos:
            if "mos" not in entry or not isinstance(entry["mos"], (int, float)):
                raise ConfigError(f"{vid}: manifest entry has no scalar MOS")
            scores.append(float(entry["mos"]))
    features = np.stack(rows)
    return vids, features, np.asarray(scores, dtype=np.float64)


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = store.load_manifest(Path(cfg.feature_dir) / "manifest.json")
    vids, features, mos = _load_fused_matrix(manifest)
    config = cfg.train or regressor.TrainConfig.for_dataset_size(len(vids))
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)

    train_idx, val_idx = evaluate.split_indices(len(vids), config.seed)
    report = regressor.train(features, mos, config, split=(train_idx, val_idx))

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params_path = out_dir / "model.cvqm"
    regressor.save_params(report.final_params, params_path, seed=config.seed, config=config)

    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,val_rmse\n")
        for e in report.epochs:
            fh.write(f"{e.epoch},{e.lr!r},{e.train_loss!r},{e.val_rmse!r}\n")

    print(
        f"trained on {train_idx.size} videos, validated on {val_idx.size}; "
        f"best epoch {report.selected_epoch} "
        f"(val RMSE {report.best_val_rmse:.4f}, swa_applied={report.swa_applied})"
    )
    print(f"params -> {params_path}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = store.load_manifest(Path(cfg.feature_dir) / "manifest.json")
    vids, features, _ = _load_fused_matrix(manifest, need_mos=False)
    params = regressor.load_params(args.params or Path(cfg.output_dir) / "model.cvqm")
    scores = regressor.predict(features, params)

    out_path = Path(cfg.output_dir) / "scores.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("video_id,score\n")
        for vid, score in zip(vids, np.atleast_1d(scores)):
            fh.write(f"{vid},{float(score)!r}\n")
    print(f"scores -> {out_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = store.load_manifest(Path(cfg.feature_dir) / "manifest.json")
    _, features, mos = _load_fused_matrix(manifest)
    base_seed = args.seed if args.seed is not None else 0
    seeds = list(range(base_seed, base_seed + args.repeats))
    report = evaluate.run_protocol(
        features, mos, config=cfg.train, repeats=args.repeats, seeds=seeds
    )

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "report.csv")
    if args.plot:
        _scatter_plot(features, mos, report, out_dir)
    print(
        f"median over {args.repeats} runs: SRCC {report.median_srcc:.4f}, "
        f"PLCC {report.median_plcc:.4f}, KRCC {report.median_krcc:.4f}"
    )
    return EXIT_OK


def _scatter_plot(features, mos, report: evaluate.EvalReport, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from campvqa.regressor import mlp_forward, train
    from dataclasses import replace

    seed = report.split_seeds[0]
    config = regressor.TrainConfig.for_dataset_size(mos.size)
    train_idx, test_idx = evaluate.split_indices(mos.size, seed)
    result = train(features, mos, replace(config, seed=seed), split=(train_idx, test_idx))
    pred = mlp_forward(features[test_idx], result.final_params, mode="eval")

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(mos[test_idx], pred, s=12, alpha=0.6)
    ax.set_xlabel("MOS")
    ax.set_ylabel("predicted score")
    ax.set_title(f"run seed {seed}")
    fig.tight_layout()
    fig.savefig(out_dir / f"scatter_seed{seed}.png", dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="campvqa",
        description="Video quality pipeline: fragment extraction, feature fusion, "
        "regressor training and evaluation.",
    )
    parser.add_argument("--config", help="pipeline config JSON", default=None)
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="per-video parallelism")
    parser.add_argument("--seed", type=int, default=None, help="base random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_frag = sub.add_parser("fragment", help="extract fragment mosaics and prompts")
    p_frag.add_argument("videos", nargs="+", help=".y4m files or PNG frame directories")
    p_frag.add_argument(
        "--prompt-mode", choices=(prompts.TRAIN, prompts.PREDICT),
        default=prompts.PREDICT,
    )
    p_frag.set_defaults(func=cmd_fragment)

    p_fuse = sub.add_parser("fuse", help="fuse per-modality embeddings per video")
    p_fuse.set_defaults(func=cmd_fuse)

    p_train = sub.add_parser("train", help="train the quality regressor")
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="score videos with trained params")
    p_pred.add_argument("--params", default=None, help="model parameters file")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="run the repeated-split evaluation protocol")
    p_eval.add_argument("--repeats", type=int, default=evaluate.DEFAULT_REPEATS)
    p_eval.add_argument("--plot", action="store_true", help="write pred-vs-MOS scatter PNG")
    p_eval.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.from_file(args.config)
        return args.func(args, cfg)
    except CampVqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
