"""Quality-aware prompt construction from video metadata.

Metadata dimensions (resolution, bitrate, framerate) are bucketed into five
quality levels through a threshold table, each bucket carrying a descriptive
hint. The hints feed prompt templates for the caption generator. Train-mode
prompts embed a quality level quantized from the ground-truth score; predict
mode substitutes a neutral placeholder so no label information leaks.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from campvqa.errors import ConfigError, RangeError
from campvqa.media import VideoMetadata

TRAIN = "train"
PREDICT = "predict"

# Placeholder used in predict mode; must not contain any level label.
NEUTRAL_LEVEL = "not yet determined"

_TEMPLATE_FILES = {
    "quality": "quality.txt",
    "fragment": "fragment.txt",
    "residual": "residual.txt",
    "content": "content.txt",
}


@dataclass(frozen=True)
class HintThresholds:
    """Per-dimension breakpoints and hint texts, plus the level label set."""

    levels: tuple[str, ...]
    # dimension -> (strictly increasing breakpoints, hint text per level)
    dimensions: dict[str, tuple[tuple[float, ...], tuple[str, ...]]]

    def __post_init__(self) -> None:
        if len(self.levels) < 2:
            raise ConfigError("need at least two quality levels")
        for dim, (breaks, hints) in self.dimensions.items():
            if list(breaks) != sorted(set(breaks)):
                raise ConfigError(f"{dim}: breakpoints must be strictly increasing")
            if len(hints) != len(breaks) + 1:
                raise ConfigError(
                    f"{dim}: {len(breaks)} breakpoints need {len(breaks) + 1} hints, "
                    f"got {len(hints)}"
                )
            if len(hints) != len(self.levels):
                raise ConfigError(f"{dim}: hint count must match level count")

    @classmethod
    def from_json(cls, path: str | Path) -> "HintThresholds":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls._from_dict(raw)

    @classmethod
    def default(cls) -> "HintThresholds":
        raw = json.loads(
            resources.files("campvqa.data").joinpath("thresholds.json").read_text("utf-8")
        )
        return cls._from_dict(raw)

    @classmethod
    def _from_dict(cls, raw: dict) -> "HintThresholds":
        try:
            levels = tuple(raw["levels"])
            dims = {
                name: (tuple(float(b) for b in spec["breaks"]), tuple(spec["hints"]))
                for name, spec in raw["dimensions"].items()
            }
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed thresholds table: {exc}") from exc
        return cls(levels=levels, dimensions=dims)


@dataclass(frozen=True)
class PromptSet:
    p_qlt: str
    p_res: str
    p_frag: str
    mode: str  # TRAIN or PREDICT
    p_content: str | None = None

    def to_dict(self) -> dict:
        return {
            "qlt": self.p_qlt,
            "res": self.p_res,
            "frag": self.p_frag,
            "content": self.p_content,
            "mode": self.mode,
        }


def classify_metadata(
    meta: VideoMetadata, thresholds: HintThresholds
) -> dict[str, tuple[str, str]]:
    """Map each available metadata dimension to (level label, hint text).

    Buckets are half-open [lo, hi): a value equal to a breakpoint lands in
    the upper bucket. A missing bitrate simply omits that dimension.
    """
    values: dict[str, float | None] = {
        "resolution": float(meta.height),
        "bitrate": meta.bitrate,
        "framerate": float(meta.framerate),
    }
    hints: dict[str, tuple[str, str]] = {}
    for dim, (breaks, texts) in thresholds.dimensions.items():
        value = values.get(dim)
        if value is None:
            continue
        idx = bisect_right(breaks, value)
        hints[dim] = (thresholds.levels[idx], texts[idx])
    return hints


def mos_to_level(
    mos: float, scale: tuple[float, float], levels: tuple[str, ...] | None = None
) -> str:
    """Quantize a score on [min, max] into one of five uniform buckets."""
    lo, hi = scale
    if lo >= hi:
        raise ConfigError(f"scale min must be < max, got {scale}")
    if not lo <= mos <= hi:
        raise RangeError(f"score {mos} outside scale [{lo}, {hi}]")
    if levels is None:
        levels = HintThresholds.default().levels
    n = len(levels)
    idx = int((mos - lo) / (hi - lo) * n)
    return levels[min(idx, n - 1)]  # top of scale maps to the last level


def load_templates(template_dir: str | Path | None = None) -> dict[str, str]:
    """Read prompt templates; None falls back to the packaged defaults."""
    templates: dict[str, str] = {}
    for key, fname in _TEMPLATE_FILES.items():
        if template_dir is None:
            text = resources.files("campvqa.data.templates").joinpath(fname).read_text("utf-8")
        else:
            path = Path(template_dir) / fname
            if not path.exists():
                raise ConfigError(f"missing template file: {path}")
            text = path.read_text("utf-8")
        templates[key] = text.strip()
    return templates


def build_prompts(
    hints: dict[str, tuple[str, str]],
    mode: str,
    level: str | None = None,
    templates: dict[str, str] | None = None,
    include_content: bool = False,
) -> PromptSet:
    """Instantiate prompt templates with hint texts and the level slot.

    Train mode requires ``level`` (from mos_to_level); predict mode ignores
    it and fills the slot with a neutral placeholder. Prompts never embed a
    numeric ground-truth score.
    """
    if mode not in (TRAIN, PREDICT):
        raise ConfigError(f"mode must be '{TRAIN}' or '{PREDICT}', got {mode!r}")
    if mode == TRAIN and not level:
        raise ConfigError("train mode requires a quantized quality level")
    if templates is None:
        templates = load_templates(None)

    hint_text = "; ".join(text for _, text in hints.values()) if hints else "none available"
    slot = level if mode == TRAIN else NEUTRAL_LEVEL
    fill = {"hints": hint_text, "level": slot}
    try:
        return PromptSet(
            p_qlt=templates["quality"].format(**fill),
            p_res=templates["residual"].format(**fill),
            p_frag=templates["fragment"].format(**fill),
            p_content=templates["content"].format(**fill) if include_content else None,
            mode=mode,
        )
    except KeyError as exc:
        raise ConfigError(f"template references unknown slot {exc}") from exc


def write_prompts_json(prompts: PromptSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prompts.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
