"""Dual-encoder backbone abstraction and the prompt-similarity classifier.

Backbones expose paired image/text encoders projecting into one shared space.
All embeddings leaving this module are L2-normalized float32 rows. Prediction
is softmax over scaled cosine similarities between image rows and one text
row per class.

Embedding exchange format (consumed by :mod:`fsvlm.diagnostics`): a directory
holding ``embeddings.bin`` (little-endian float32, row-major) and
``meta.json`` with ``{n, d, modality, class_names, labels, ids}``. Round trips
are bit-exact.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import PromptSet, SlidePatch
from .errors import ConfigurationError, ValidationError

DEFAULT_LOGIT_SCALE = 100.0
NORM_TOLERANCE = 1e-5


@dataclass(frozen=True)
class BackboneDescriptor:
    """Static facts about a backbone needed by the rest of the harness."""

    name: str
    embed_dim: int = 512
    input_size: int = 224
    has_learned_logit_scale: bool = True
    architecture_family: str = "dual-contrastive"  # or "coca-style"

    def __post_init__(self) -> None:
        if self.embed_dim <= 0:
            raise ConfigurationError(f"embed_dim must be positive, got {self.embed_dim}")


@dataclass
class EmbeddingBatch:
    """L2-normalized embedding rows with modality and label metadata.

    The float dtype of ``vectors`` is preserved (encoders produce float32,
    which round-trips the exchange format bit-exactly); the on-disk format is
    always little-endian float32.
    """

    vectors: np.ndarray  # N x d, unit rows
    modality: str  # "image" | "text"
    ids: list[str]
    labels: Optional[np.ndarray] = None  # class index per row
    class_names: Optional[list[str]] = None

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors)
        if self.vectors.dtype not in (np.float32, np.float64):
            self.vectors = self.vectors.astype(np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValidationError(f"embedding matrix must be NxD with N>=1, got {self.vectors.shape}")
        if self.modality not in ("image", "text"):
            raise ValidationError(f"modality must be image|text, got {self.modality!r}")
        if len(self.ids) != self.vectors.shape[0]:
            raise ValidationError("ids length does not match row count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.vectors.shape[0]:
                raise ValidationError("labels length does not match row count")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValidationError(f"embedding rows must be unit norm (worst deviation {worst:.2e})")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class DualEncoderBackbone(nn.Module):
    """Common protocol over dual-encoder vision-language models.

    Subclasses provide raw (unnormalized) projected features for both
    modalities plus structural access to the transformer blocks and
    projection heads so adaptation strategies can do their surgery uniformly.
    """

    descriptor: BackboneDescriptor

    def preprocess(self, pixels: np.ndarray) -> torch.Tensor:
        """uint8 HxWx3 patch -> float tensor (3, input_size, input_size)."""
        raise NotImplementedError

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def encode_image_features(self, pixel_batch: torch.Tensor) -> torch.Tensor:
        """Projected image features, NOT normalized. Differentiable."""
        raise NotImplementedError

    def encode_text_features(self, token_batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def blocks(self, side: str) -> nn.ModuleList:
        """Transformer blocks of the image or text tower, input-to-output order."""
        raise NotImplementedError

    def projection(self, side: str) -> nn.Module:
        raise NotImplementedError

    def logit_scale_value(self) -> float:
        """exp of the learned scale, or the 100.0 convention when absent."""
        scale = getattr(self, "logit_scale", None)
        if scale is None or not self.descriptor.has_learned_logit_scale:
            return DEFAULT_LOGIT_SCALE
        return float(torch.exp(scale.detach()))


# --- registry ---------------------------------------------------------------

_BUILTIN_BUILDERS = {
    "toy": ("fsvlm.toy", "build_toy_backbone"),
    "clip-vit-b16": ("fsvlm.pretrained", "build_clip"),
    "plip": ("fsvlm.pretrained", "build_plip"),
    "conch": ("fsvlm.pretrained", "build_conch"),
}
_REGISTRY: dict[str, Callable[..., DualEncoderBackbone]] = {}


def register_backbone(name: str, builder: Callable[..., DualEncoderBackbone]) -> None:
    if name in _REGISTRY:
        raise ConfigurationError(f"backbone {name!r} already registered")
    _REGISTRY[name] = builder


def build_backbone(name: str, **kwargs) -> DualEncoderBackbone:
    if name in _REGISTRY:
        return _REGISTRY[name](**kwargs)
    if name in _BUILTIN_BUILDERS:
        module_name, fn_name = _BUILTIN_BUILDERS[name]
        builder = getattr(importlib.import_module(module_name), fn_name)
        return builder(**kwargs)
    known = sorted(set(_REGISTRY) | set(_BUILTIN_BUILDERS))
    raise ConfigurationError(f"unknown backbone {name!r}; known: {known}")


def available_backbones() -> list[str]:
    return sorted(set(_REGISTRY) | set(_BUILTIN_BUILDERS))


# --- encoding ops -----------------------------------------------------------

def _normalize_rows(features: torch.Tensor) -> np.ndarray:
    vecs = features.detach().cpu().double()
    vecs = vecs / vecs.norm(dim=1, keepdim=True)
    out = vecs.float().numpy()
    # float32 rounding can push norms just past tolerance; renormalize in f64
    norms = np.linalg.norm(out.astype(np.float64), axis=1, keepdims=True)
    return (out / norms).astype(np.float32)


def encode_images(
    model: DualEncoderBackbone,
    patches: Sequence[SlidePatch],
    classes: Optional[Sequence[str]] = None,
    batch_size: int = 32,
) -> EmbeddingBatch:
    """Encode patches in evaluation mode; row order follows input order."""
    if len(patches) == 0:
        raise ValidationError("encode_images needs at least one patch")
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            batch = patches[start : start + batch_size]
            px = torch.stack([model.preprocess(p.pixels) for p in batch])
            chunks.append(model.encode_image_features(px))
    features = torch.cat(chunks, dim=0)
    labels = None
    if classes is not None:
        class_index = {c: i for i, c in enumerate(classes)}
        labels = np.array([class_index[p.label] for p in patches], dtype=np.int64)
    return EmbeddingBatch(
        vectors=_normalize_rows(features),
        modality="image",
        ids=[p.patch_id for p in patches],
        labels=labels,
        class_names=list(classes) if classes is not None else None,
    )


def encode_prompts(model: DualEncoderBackbone, prompts: PromptSet) -> EmbeddingBatch:
    """Encode one prompt per class; row order follows class order."""
    model.eval()
    tokens = model.tokenize(prompts.as_list())
    with torch.no_grad():
        features = model.encode_text_features(tokens)
    return EmbeddingBatch(
        vectors=_normalize_rows(features),
        modality="text",
        ids=list(prompts.classes),
        labels=np.arange(len(prompts.classes), dtype=np.int64),
        class_names=prompts.classes,
    )


def classify(
    image_embs: EmbeddingBatch,
    text_embs: EmbeddingBatch,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over scaled cosine similarities.

    Returns (probabilities N x C, argmax predictions). Ties break toward the
    lowest class index.
    """
    if image_embs.dim != text_embs.dim:
        raise ValidationError(
            f"embedding dims differ: image {image_embs.dim} vs text {text_embs.dim}"
        )
    if logit_scale < 0:
        raise ValidationError(f"logit_scale must be nonnegative, got {logit_scale}")
    img = image_embs.vectors.astype(np.float64)
    txt = text_embs.vectors.astype(np.float64)
    if not (np.all(np.isfinite(img)) and np.all(np.isfinite(txt))):
        raise ValidationError("non-finite embeddings")
    cosines = img @ txt.T  # rows already unit norm
    logits = logit_scale * cosines
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    preds = np.argmax(cosines, axis=1)
    return probs, preds


# --- exchange format --------------------------------------------------------

def save_embeddings(batch: EmbeddingBatch, directory: str | Path, extra_meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vecs = np.ascontiguousarray(batch.vectors, dtype="<f4")
    vecs.tofile(directory / "embeddings.bin")
    meta = {
        "n": batch.n,
        "d": batch.dim,
        "modality": batch.modality,
        "class_names": batch.class_names,
        "labels": batch.labels.tolist() if batch.labels is not None else None,
        "ids": batch.ids,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_embeddings(directory: str | Path) -> EmbeddingBatch:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    vecs = np.fromfile(directory / "embeddings.bin", dtype="<f4")
    expected = meta["n"] * meta["d"]
    if vecs.size != expected:
        raise ValidationError(
            f"{directory}: embeddings.bin holds {vecs.size} floats, expected {expected}"
        )
    return EmbeddingBatch(
        vectors=vecs.reshape(meta["n"], meta["d"]),
        modality=meta["modality"],
        ids=list(meta["ids"]),
        labels=np.array(meta["labels"], dtype=np.int64) if meta["labels"] is not None else None,
        class_names=list(meta["class_names"]) if meta["class_names"] is not None else None,
    )
