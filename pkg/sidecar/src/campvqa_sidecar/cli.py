"""Sidecar entry point: run one encoder job described by a JSON file."""

from __future__ import annotations

import argparse
import json
import sys

from campvqa_sidecar.backends import make_backend
from campvqa_sidecar.errors import SidecarError
from campvqa_sidecar.jobs import SidecarJob, run_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="campvqa-sidecar",
        description="Run caption generation and feature extraction for one video job.",
    )
    parser.add_argument("--job", required=True, help="job description JSON")
    parser.add_argument(
        "--backend", choices=("pretrained", "stub"), default="pretrained",
        help="encoder set; 'stub' is a deterministic offline stand-in",
    )
    parser.add_argument("--device", default=None, help="overrides the job's device hint")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = SidecarJob.from_json(args.job)
        if args.device:
            job.device = args.device
        backend = make_backend(args.backend, device=job.device)
        outputs = run_job(job, backend)
    except SidecarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"video_id": job.video_id, "outputs": outputs}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
