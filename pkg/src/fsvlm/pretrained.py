"""Loaders for pretrained dual-encoder backbones.

Weights are an external dependency: they must already be present in the local
cache (``FSVLM_CACHE`` or the default HuggingFace cache). Nothing here is
exercised by the test suite; the bundled toy backbone covers desk-scale runs.

CLIP and PLIP share the HuggingFace CLIP format and load through the same
wrapper. CoCa-style backbones ship custom code with their weights; only the
contrastive embedding heads are used here, and a loader must be plugged in
via :func:`fsvlm.encoder.register_backbone`.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .encoder import BackboneDescriptor, DualEncoderBackbone
from .errors import BackboneUnavailableError

CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


def _cache_dir() -> str | None:
    return os.environ.get("FSVLM_CACHE")


class HfClipBackbone(DualEncoderBackbone):
    """Wrapper giving HuggingFace CLIP-format models the harness protocol."""

    def __init__(self, model, tokenizer, descriptor: BackboneDescriptor):
        super().__init__()
        self.descriptor = descriptor
        self.clip = model
        self._tokenizer = tokenizer
        self.logit_scale = model.logit_scale

    def preprocess(self, pixels: np.ndarray) -> torch.Tensor:
        size = self.descriptor.input_size
        img = Image.fromarray(pixels).resize((size, size), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = (arr - np.array(CLIP_IMAGE_MEAN, dtype=np.float32)) / np.array(
            CLIP_IMAGE_STD, dtype=np.float32
        )
        return torch.from_numpy(arr).permute(2, 0, 1)

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        enc = self._tokenizer(list(texts), padding=True, truncation=True, return_tensors="pt")
        self._last_attention_mask = enc["attention_mask"]
        return enc["input_ids"]

    def encode_image_features(self, pixel_batch: torch.Tensor) -> torch.Tensor:
        return self.clip.get_image_features(pixel_values=pixel_batch)

    def encode_text_features(self, token_batch: torch.Tensor) -> torch.Tensor:
        mask = (token_batch != self._tokenizer.pad_token_id).long()
        return self.clip.get_text_features(input_ids=token_batch, attention_mask=mask)

    def blocks(self, side: str) -> nn.ModuleList:
        if side == "image":
            return self.clip.vision_model.encoder.layers
        if side == "text":
            return self.clip.text_model.encoder.layers
        raise ValueError(f"side must be image|text, got {side!r}")

    def projection(self, side: str) -> nn.Module:
        if side == "image":
            return self.clip.visual_projection
        if side == "text":
            return self.clip.text_projection
        raise ValueError(f"side must be image|text, got {side!r}")


def _load_hf_clip(model_id: str, name: str, local_only: bool = True) -> HfClipBackbone:
    try:
        from transformers import CLIPModel, CLIPTokenizerFast
    except ImportError as exc:
        raise BackboneUnavailableError(
            f"backbone {name!r} needs the 'transformers' package "
            "(pip install 'artifact[pretrained]')"
        ) from exc
    kwargs = {"local_files_only": local_only}
    if _cache_dir():
        kwargs["cache_dir"] = _cache_dir()
    try:
        model = CLIPModel.from_pretrained(model_id, **kwargs)
        tokenizer = CLIPTokenizerFast.from_pretrained(model_id, **kwargs)
    except OSError as exc:
        raise BackboneUnavailableError(
            f"weights for {name!r} ({model_id}) not found in the local cache; "
            "download them on a connected machine and point FSVLM_CACHE at the cache"
        ) from exc
    model.eval()
    descriptor = BackboneDescriptor(
        name=name,
        embed_dim=model.config.projection_dim,
        input_size=model.config.vision_config.image_size,
        has_learned_logit_scale=True,
        architecture_family="dual-contrastive",
    )
    return HfClipBackbone(model, tokenizer, descriptor)


def build_clip(local_only: bool = True) -> HfClipBackbone:
    return _load_hf_clip("openai/clip-vit-base-patch16", "clip-vit-b16", local_only)


def build_plip(local_only: bool = True) -> HfClipBackbone:
    return _load_hf_clip("vinid/plip", "plip", local_only)


def build_conch(**_: object) -> DualEncoderBackbone:
    raise BackboneUnavailableError(
        "the CoCa-style pathology backbone ships gated weights with custom "
        "loader code; wrap it in a DualEncoderBackbone and plug it in with "
        "fsvlm.encoder.register_backbone('conch', builder)"
    )
