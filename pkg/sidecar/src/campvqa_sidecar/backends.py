"""Encoder backends: pretrained models, plus a deterministic stub.

The pretrained backend wraps a BLIP-2-class captioner, a CLIP-class
image/text encoder, a SlowFast-class dual-pathway extractor and a Swin-class
spatial encoder. It loads everything lazily so the sidecar starts fast and
fails with a clear EncoderError when weights are unavailable.

The stub backend derives captions from simple image statistics and
embeddings from content hashes. It exists so the file contracts can be
exercised end to end on machines without GPU or model downloads; outputs are
deterministic functions of the inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from PIL import Image

from campvqa_sidecar.errors import EncoderError


class EncoderBackend(Protocol):
    def caption(self, image: np.ndarray, prompt: str) -> str: ...
    def encode_image(self, image: np.ndarray) -> np.ndarray: ...
    def encode_text(self, text: str) -> np.ndarray: ...
    def temporal_features(self, segment_images: list[np.ndarray]) -> np.ndarray: ...
    def spatial_features(self, segment_images: list[np.ndarray]) -> np.ndarray: ...


def _hash_rng(*parts: bytes) -> np.random.Generator:
    digest = hashlib.sha256(b"\x1f".join(parts)).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


_BRIGHTNESS = ("very dark", "dim", "moderately lit", "bright", "very bright")
_TEXTURE = ("flat", "smooth", "lightly textured", "busy", "noisy")
_MOTION = ("static", "subtle changes", "moderate motion", "strong motion", "intense motion")


@dataclass
class StubBackend:
    """Deterministic stand-in for the pretrained encoders."""

    text_dim: int = 512
    image_dim: int = 512
    slow_dim: int = 2048
    fast_dim: int = 256
    spatial_dim: int = 1536

    def caption(self, image: np.ndarray, prompt: str) -> str:
        mean = float(image.mean())
        std = float(image.std())
        active = float((image > 16).mean())
        brightness = _BRIGHTNESS[min(4, int(mean / 52))]
        texture = _TEXTURE[min(4, int(std / 26))]
        motion = _MOTION[min(4, int(active * 5))]
        lead = int(hashlib.sha256(prompt.encode()).hexdigest(), 16) % 3
        openers = ("the image shows", "this view appears", "the picture looks")
        return f"{openers[lead]} {brightness} and {texture}, with {motion} overall."

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        rng = _hash_rng(b"img", np.ascontiguousarray(image).tobytes())
        return _unit(rng.normal(size=self.image_dim)).astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        rng = _hash_rng(b"txt", text.encode("utf-8"))
        return _unit(rng.normal(size=self.text_dim)).astype(np.float32)

    def temporal_features(self, segment_images: list[np.ndarray]) -> np.ndarray:
        rng = _hash_rng(b"tm", *(np.ascontiguousarray(a).tobytes() for a in segment_images))
        slow = _unit(rng.normal(size=self.slow_dim))
        fast = _unit(rng.normal(size=self.fast_dim))
        return np.concatenate([slow, fast]).astype(np.float32)

    def spatial_features(self, segment_images: list[np.ndarray]) -> np.ndarray:
        # GAP over per-frame hash vectors: identical frames pool identically
        per_frame = [
            _hash_rng(b"sv", np.ascontiguousarray(a).tobytes()).normal(size=self.spatial_dim)
            for a in segment_images
        ]
        return np.mean(per_frame, axis=0).astype(np.float32)


@dataclass
class PretrainedBackend:
    """BLIP-2 captions, CLIP embeddings, SlowFast motion, Swin spatial.

    Every model is loaded on first use; environments without the weights get
    an EncoderError naming the missing piece instead of a deep stack trace.
    """

    captioner_name: str = "Salesforce/blip2-flan-t5-xl"
    clip_name: str = "openai/clip-vit-base-patch32"
    device: str = "cpu"
    max_caption_tokens: int = 60
    _models: dict = field(default_factory=dict, repr=False)

    def _torch(self):
        try:
            import torch
        except ImportError as exc:
            raise EncoderError("torch is required for the pretrained backend") from exc
        return torch

    def _load_captioner(self):
        if "captioner" not in self._models:
            try:
                from transformers import AutoProcessor, Blip2ForConditionalGeneration

                processor = AutoProcessor.from_pretrained(self.captioner_name)
                model = Blip2ForConditionalGeneration.from_pretrained(self.captioner_name)
                model.to(self.device).eval()
            except Exception as exc:
                raise EncoderError(f"cannot load captioner {self.captioner_name}: {exc}") from exc
            self._models["captioner"] = (processor, model)
        return self._models["captioner"]

    def _load_clip(self):
        if "clip" not in self._models:
            try:
                from transformers import CLIPModel, CLIPProcessor

                processor = CLIPProcessor.from_pretrained(self.clip_name)
                model = CLIPModel.from_pretrained(self.clip_name)
                model.to(self.device).eval()
            except Exception as exc:
                raise EncoderError(f"cannot load CLIP {self.clip_name}: {exc}") from exc
            self._models["clip"] = (processor, model)
        return self._models["clip"]

    def _load_slowfast(self):
        if "slowfast" not in self._models:
            try:
                import torch

                model = torch.hub.load(
                    "facebookresearch/pytorchvideo", "slowfast_r50", pretrained=True
                )
                model.to(self.device).eval()
            except Exception as exc:
                raise EncoderError(f"cannot load SlowFast: {exc}") from exc
            self._models["slowfast"] = model
        return self._models["slowfast"]

    def _load_swin(self):
        if "swin" not in self._models:
            try:
                import torch.nn as nn
                from torchvision.models import Swin_B_Weights, swin_b

                model = swin_b(weights=Swin_B_Weights.IMAGENET1K_V1)
                model.head = nn.Identity()  # keep the pooled backbone features
                model.to(self.device).eval()
            except Exception as exc:
                raise EncoderError(f"cannot load Swin: {exc}") from exc
            self._models["swin"] = model
        return self._models["swin"]

    def caption(self, image: np.ndarray, prompt: str) -> str:
        torch = self._torch()
        processor, model = self._load_captioner()
        inputs = processor(
            images=Image.fromarray(image), text=prompt, return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            # greedy decoding keeps captions deterministic
            ids = model.generate(
                **inputs,
                do_sample=False,
                num_beams=1,
                max_new_tokens=self.max_caption_tokens,
            )
        return processor.batch_decode(ids, skip_special_tokens=True)[0].strip()

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch()
        processor, model = self._load_clip()
        inputs = processor(images=Image.fromarray(image), return_tensors="pt").to(self.device)
        with torch.no_grad():
            feats = model.get_image_features(**inputs)
        return feats[0].cpu().numpy().astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        torch = self._torch()
        processor, model = self._load_clip()
        inputs = processor(
            text=[text], return_tensors="pt", padding=True, truncation=True
        ).to(self.device)
        with torch.no_grad():
            feats = model.get_text_features(**inputs)
        return feats[0].cpu().numpy().astype(np.float32)

    def temporal_features(self, segment_images: list[np.ndarray]) -> np.ndarray:
        torch = self._torch()
        model = self._load_slowfast()
        frames = torch.stack(
            [torch.from_numpy(a).permute(2, 0, 1).float() / 255.0 for a in segment_images],
            dim=1,
        ).unsqueeze(0)  # (1, C, T, H, W)
        slow = frames[:, :, :: max(1, frames.shape[2] // 8)][:, :, :8]
        fast = frames[:, :, -32:]
        with torch.no_grad():
            feats = model([slow.to(self.device), fast.to(self.device)])
        return feats.flatten().cpu().numpy().astype(np.float32)

    def spatial_features(self, segment_images: list[np.ndarray]) -> np.ndarray:
        torch = self._torch()
        model = self._load_swin()
        import torchvision.transforms.functional as tvf

        per_frame = []
        with torch.no_grad():
            for a in segment_images:
                img = tvf.resize(torch.from_numpy(a).permute(2, 0, 1).float() / 255.0, [224, 224])
                per_frame.append(model(img.unsqueeze(0).to(self.device))[0].cpu().numpy())
        return np.mean(per_frame, axis=0).astype(np.float32)


def make_backend(name: str, device: str = "cpu") -> EncoderBackend:
    if name == "stub":
        return StubBackend()
    if name == "pretrained":
        return PretrainedBackend(device=device)
    raise EncoderError(f"unknown backend {name!r} (expected 'stub' or 'pretrained')")
