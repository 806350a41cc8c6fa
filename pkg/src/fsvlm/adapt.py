"""Adaptation strategies and the few-shot training loop.

Four ways to adapt a dual encoder under a small labeled budget:

- ``vanilla``     unfreeze the top blocks of both towers plus the projections
- ``lora``        low-rank updates on attention projections of the top blocks
- ``adapter``     bottleneck modules after each block's feed-forward network
- ``classifier``  frozen backbone, trainable head over image features

The first three train with a supervised contrastive objective (cross-entropy
over scaled image-prompt cosine similarities); the classifier trains plain
cross-entropy over its own logits and never touches the text tower.

LoRA and adapter modules are exact identities at initialization (zero-init B
matrix / zero-init up-projection), so a freshly adapted model reproduces the
frozen baseline bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .corpus import PromptSet, SlidePatch
from .encoder import DEFAULT_LOGIT_SCALE, DualEncoderBackbone
from .errors import ConfigurationError, TrainingDivergedError

STRATEGIES = ("vanilla", "lora", "adapter", "classifier")

_TARGET_ATTRS = {"query": "q_proj", "key": "k_proj", "value": "v_proj", "output": "out_proj"}
_ACTIVATIONS = {"silu": nn.SiLU, "gelu": nn.GELU, "relu": nn.ReLU}


@dataclass
class AdaptationConfig:
    """Strategy selector plus every strategy hyperparameter."""

    strategy: str = "vanilla"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("query", "value")
    lora_depth: int = 4
    adapter_bottleneck: int = 8
    adapter_nonlinearity: str = "silu"
    head_variant: str = "mlp_bn"  # linear | mlp | mlp_bn
    head_hidden: Optional[int] = None  # defaults to the embedding dim
    vanilla_unfreeze_depth: int = 4

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.lora_rank < 1:
            raise ConfigurationError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.lora_alpha <= 0:
            raise ConfigurationError(f"lora_alpha must be > 0, got {self.lora_alpha}")
        if self.adapter_bottleneck < 1:
            raise ConfigurationError(f"adapter_bottleneck must be >= 1, got {self.adapter_bottleneck}")
        if self.lora_depth < 1 or self.vanilla_unfreeze_depth < 1:
            raise ConfigurationError("depths must be >= 1")
        unknown = set(self.lora_targets) - set(_TARGET_ATTRS)
        if unknown:
            raise ConfigurationError(f"unknown lora targets {sorted(unknown)}")
        if self.head_variant not in ("linear", "mlp", "mlp_bn"):
            raise ConfigurationError(f"unknown head_variant {self.head_variant!r}")
        if self.adapter_nonlinearity not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown adapter nonlinearity {self.adapter_nonlinearity!r}")


@dataclass
class TrainSchedule:
    """Optimization schedule: warmup then linear decay to zero, early stopping
    on validation loss."""

    max_epochs: int = 100
    base_lr: float = 1e-4
    warmup_steps: int = 10
    batch_size: Optional[int] = None  # None -> min(32, total shots)
    patience: int = 10
    min_delta: float = 1e-4
    augmentation_seed: int = 0

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise ConfigurationError(f"min_delta must be >= 0, got {self.min_delta}")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")


def default_schedule(strategy: str) -> TrainSchedule:
    """Per-strategy defaults; full-parameter tuning gets the smaller rate."""
    return TrainSchedule(base_lr=1e-5 if strategy == "vanilla" else 1e-4)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, rec: dict) -> "TrainHistory":
        return cls(**rec)


# --- modules ----------------------------------------------------------------

class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable (alpha/r) * B @ A update."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ConfigurationError(
                f"lora rank {rank} exceeds min dim {min(base.in_features, base.out_features)}"
            )
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def delta_weight(self) -> torch.Tensor:
        """Realized weight update (alpha/r) * B @ A."""
        return self.scaling * (self.lora_b @ self.lora_a)


class BottleneckAdapter(nn.Module):
    """Residual down/nonlinearity/up block; identity at init (zero-init up)."""

    def __init__(self, dim: int, bottleneck: int, nonlinearity: str):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.act = _ACTIVATIONS[nonlinearity]()
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(self.act(self.down(x)))


class MlpWithAdapter(nn.Module):
    """Feed-forward sublayer followed by its bottleneck adapter."""

    def __init__(self, mlp: nn.Module, adapter: BottleneckAdapter):
        super().__init__()
        self.mlp = mlp
        self.adapter = adapter

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.adapter(self.mlp(x))


def build_classifier_head(embed_dim: int, n_classes: int, cfg: AdaptationConfig) -> nn.Module:
    hidden = cfg.head_hidden or embed_dim
    if cfg.head_variant == "linear":
        return nn.Linear(embed_dim, n_classes)
    layers: list[nn.Module] = [nn.Linear(embed_dim, hidden)]
    if cfg.head_variant == "mlp_bn":
        layers.append(nn.BatchNorm1d(hidden))
    layers.extend([nn.ReLU(), nn.Linear(hidden, n_classes)])
    return nn.Sequential(*layers)


# --- adapted model ----------------------------------------------------------

@dataclass
class AdaptedModel:
    """A backbone with one strategy applied, plus an optional head."""

    backbone: DualEncoderBackbone
    strategy: str
    config: AdaptationConfig
    head: Optional[nn.Module] = None

    @property
    def uses_text(self) -> bool:
        return self.strategy != "classifier"

    def named_trainable(self) -> dict[str, nn.Parameter]:
        out = {
            f"backbone.{name}": p
            for name, p in self.backbone.named_parameters()
            if p.requires_grad
        }
        if self.head is not None:
            out.update({f"head.{name}": p for name, p in self.head.named_parameters()})
        return out

    def named_frozen(self) -> dict[str, nn.Parameter]:
        return {
            f"backbone.{name}": p
            for name, p in self.backbone.named_parameters()
            if not p.requires_grad
        }

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.named_trainable().values())

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def train_mode(self) -> None:
        self.backbone.train()
        if self.head is not None:
            self.head.train()

    def eval_mode(self) -> None:
        self.backbone.eval()
        if self.head is not None:
            self.head.eval()


def _freeze_all(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def _attention_module(block: nn.Module) -> nn.Module:
    for attr in ("attn", "self_attn"):
        if hasattr(block, attr):
            return getattr(block, attr)
    raise ConfigurationError(f"block {type(block).__name__} exposes no attention module")


def apply_lora(model: DualEncoderBackbone, cfg: AdaptationConfig) -> AdaptedModel:
    """Wrap the configured attention projections of the top blocks of both
    towers with LoRA updates; everything else is frozen."""
    _freeze_all(model)
    for side in ("image", "text"):
        blocks = model.blocks(side)
        if cfg.lora_depth > len(blocks):
            raise ConfigurationError(
                f"lora_depth {cfg.lora_depth} exceeds {side} tower depth {len(blocks)}"
            )
        for block in list(blocks)[-cfg.lora_depth :]:
            attn = _attention_module(block)
            for target in cfg.lora_targets:
                attr = _TARGET_ATTRS[target]
                base = getattr(attn, attr, None)
                if not isinstance(base, nn.Linear):
                    raise ConfigurationError(
                        f"{side} block has no linear {target!r} projection ({attr})"
                    )
                setattr(attn, attr, LoRALinear(base, cfg.lora_rank, cfg.lora_alpha))
    return AdaptedModel(backbone=model, strategy="lora", config=cfg)


def apply_adapter(model: DualEncoderBackbone, cfg: AdaptationConfig) -> AdaptedModel:
    """Insert one bottleneck adapter after the feed-forward network of every
    block in both towers; only adapter parameters train."""
    _freeze_all(model)
    for side in ("image", "text"):
        for block in model.blocks(side):
            if not hasattr(block, "mlp"):
                raise ConfigurationError(f"{side} block exposes no mlp module")
            mlp = block.mlp
            dim = _mlp_output_dim(mlp)
            if cfg.adapter_bottleneck >= dim:
                raise ConfigurationError(
                    f"adapter bottleneck {cfg.adapter_bottleneck} must be < hidden dim {dim}"
                )
            adapter = BottleneckAdapter(dim, cfg.adapter_bottleneck, cfg.adapter_nonlinearity)
            block.mlp = MlpWithAdapter(mlp, adapter)
    return AdaptedModel(backbone=model, strategy="adapter", config=cfg)


def _mlp_output_dim(mlp: nn.Module) -> int:
    if hasattr(mlp, "fc2"):
        return mlp.fc2.out_features
    raise ConfigurationError(f"cannot infer hidden dim of {type(mlp).__name__}")


def apply_classifier_head(
    model: DualEncoderBackbone, cfg: AdaptationConfig, n_classes: int
) -> AdaptedModel:
    """Freeze the whole backbone and train only a head on image features."""
    _freeze_all(model)
    head = build_classifier_head(model.descriptor.embed_dim, n_classes, cfg)
    return AdaptedModel(backbone=model, strategy="classifier", config=cfg, head=head)


def select_vanilla_trainables(model: DualEncoderBackbone, cfg: AdaptationConfig) -> AdaptedModel:
    """Unfreeze exactly the top ``vanilla_unfreeze_depth`` blocks of each tower
    plus both projection layers."""
    _freeze_all(model)
    for side in ("image", "text"):
        blocks = model.blocks(side)
        if cfg.vanilla_unfreeze_depth > len(blocks):
            raise ConfigurationError(
                f"vanilla_unfreeze_depth {cfg.vanilla_unfreeze_depth} exceeds "
                f"{side} tower depth {len(blocks)}"
            )
        for block in list(blocks)[-cfg.vanilla_unfreeze_depth :]:
            for p in block.parameters():
                p.requires_grad_(True)
        for p in model.projection(side).parameters():
            p.requires_grad_(True)
    return AdaptedModel(backbone=model, strategy="vanilla", config=cfg)


def apply_strategy(
    model: DualEncoderBackbone,
    cfg: AdaptationConfig,
    n_classes: int,
    init_seed: Optional[int] = None,
) -> AdaptedModel:
    """Dispatch on cfg.strategy; seeds new-module initialization if asked."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    if cfg.strategy == "lora":
        return apply_lora(model, cfg)
    if cfg.strategy == "adapter":
        return apply_adapter(model, cfg)
    if cfg.strategy == "classifier":
        return apply_classifier_head(model, cfg, n_classes)
    if cfg.strategy == "vanilla":
        return select_vanilla_trainables(model, cfg)
    raise ConfigurationError(f"unknown strategy {cfg.strategy!r}")


# --- augmentation -----------------------------------------------------------

def augment_patch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flips, +/-15 degree rotation, mild brightness/contrast jitter.

    Always consumes the same number of random draws so the stream stays
    aligned regardless of which flips fire.
    """
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    angle = rng.uniform(-15.0, 15.0)
    brightness = 1.0 + rng.uniform(-0.1, 0.1)
    contrast = 1.0 + rng.uniform(-0.1, 0.1)

    out = pixels
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    img = Image.fromarray(np.ascontiguousarray(out))
    img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=(255, 255, 255))
    arr = np.asarray(img, dtype=np.float32)
    mean = arr.mean()
    arr = (arr - mean) * contrast + mean
    arr = arr * brightness
    return np.clip(arr, 0.0, 255.0).astype(np.uint8)


# --- training loop ----------------------------------------------------------

def _contrastive_logits(
    adapted: AdaptedModel, pixel_batch: torch.Tensor, tokens: torch.Tensor
) -> torch.Tensor:
    img = F.normalize(adapted.backbone.encode_image_features(pixel_batch), dim=1)
    txt = F.normalize(adapted.backbone.encode_text_features(tokens), dim=1)
    return adapted.backbone.logit_scale_value() * img @ txt.T


def _head_logits(adapted: AdaptedModel, pixel_batch: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        feats = adapted.backbone.encode_image_features(pixel_batch)
    return adapted.head(feats)


def _batch_logits(adapted: AdaptedModel, pixel_batch: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    if adapted.strategy == "classifier":
        return _head_logits(adapted, pixel_batch)
    return _contrastive_logits(adapted, pixel_batch, tokens)


def _validation_pass(
    adapted: AdaptedModel,
    tokens: torch.Tensor,
    val_pixels: torch.Tensor,
    val_labels: torch.Tensor,
    batch_size: int = 64,
) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on the held-out set (eval mode)."""
    adapted.eval_mode()
    losses = []
    correct = 0
    with torch.no_grad():
        for start in range(0, val_pixels.shape[0], batch_size):
            px = val_pixels[start : start + batch_size]
            lab = val_labels[start : start + batch_size]
            logits = _batch_logits(adapted, px, tokens)
            losses.append(F.cross_entropy(logits, lab, reduction="sum").item())
            correct += int((logits.argmax(dim=1) == lab).sum())
    n = val_pixels.shape[0]
    return sum(losses) / n, correct / n


def _snapshot(adapted: AdaptedModel) -> dict[str, torch.Tensor]:
    state = {name: p.detach().clone() for name, p in adapted.named_trainable().items()}
    if adapted.head is not None:
        state.update(
            {f"head_buffer.{name}": b.detach().clone() for name, b in adapted.head.named_buffers()}
        )
    return state


def _restore(adapted: AdaptedModel, state: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        named = adapted.named_trainable()
        buffers = (
            {f"head_buffer.{n}": b for n, b in adapted.head.named_buffers()}
            if adapted.head is not None
            else {}
        )
        for name, saved in state.items():
            target = named.get(name)
            if target is None:
                target = buffers[name]
            target.copy_(saved)


def train(
    adapted: AdaptedModel,
    shots: dict[str, list[SlidePatch]],
    prompts: PromptSet,
    schedule: TrainSchedule,
    val_patches: Sequence[SlidePatch],
    schedule_seed: int = 0,
) -> TrainHistory:
    """Train the adapted model on the shot set, early-stopping on validation
    loss, and leave it holding the best epoch's weights.

    ``schedule_seed`` drives batch shuffling (augmentation is driven by
    ``schedule.augmentation_seed``); fixed seeds give identical histories.
    """
    classes = prompts.classes
    class_index = {c: i for i, c in enumerate(classes)}
    train_items: list[tuple[SlidePatch, int]] = []
    for cls in classes:
        for patch in shots.get(cls, []):
            train_items.append((patch, class_index[cls]))
    if not train_items:
        raise ValueError("zero-shot (k=0) is evaluation-only; nothing to train on")
    for patch in val_patches:
        if patch.label not in class_index:
            raise ValueError(f"validation patch {patch.patch_id} has unknown label")

    n_train = len(train_items)
    batch_size = schedule.batch_size or min(32, n_train)
    steps_per_epoch = math.ceil(n_train / batch_size)
    total_steps = schedule.max_epochs * steps_per_epoch
    if schedule.warmup_steps >= total_steps:
        raise ConfigurationError(
            f"warmup_steps {schedule.warmup_steps} must be < total steps {total_steps}"
        )

    backbone = adapted.backbone
    tokens = backbone.tokenize(prompts.as_list())
    val_pixels = torch.stack([backbone.preprocess(p.pixels) for p in val_patches])
    val_labels = torch.tensor([class_index[p.label] for p in val_patches], dtype=torch.long)

    params = adapted.trainable_parameters()
    if not params:
        raise ConfigurationError(f"strategy {adapted.strategy!r} left no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=schedule.base_lr)
    rng = np.random.default_rng([schedule.augmentation_seed, schedule_seed])
    torch.manual_seed(schedule_seed)

    history = TrainHistory()
    best_loss = math.inf
    best_state = _snapshot(adapted)
    stagnant = 0
    step = 0

    for epoch in range(1, schedule.max_epochs + 1):
        adapted.train_mode()
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            pixels = torch.stack(
                [
                    backbone.preprocess(augment_patch(train_items[i][0].pixels, rng))
                    for i in idx
                ]
            )
            labels = torch.tensor([train_items[i][1] for i in idx], dtype=torch.long)
            logits = _batch_logits(adapted, pixels, tokens)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(strategy={adapted.strategy}, lr={schedule.base_lr})"
                )
            optimizer.zero_grad()
            loss.backward()
            lr = schedule.base_lr * _lr_factor(step, schedule.warmup_steps, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            step += 1
            epoch_loss += loss.item() * len(idx)

        val_loss, val_acc = _validation_pass(adapted, tokens, val_pixels, val_labels)
        history.train_loss.append(epoch_loss / n_train)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.stopped_epoch = epoch

        if best_loss - val_loss > schedule.min_delta:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = _snapshot(adapted)
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= schedule.patience:
                break

    _restore(adapted, best_state)
    adapted.eval_mode()
    return history


def _lr_factor(step: int, warmup: int, total: int) -> float:
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


def initial_loss(
    adapted: AdaptedModel,
    patches: Sequence[SlidePatch],
    prompts: PromptSet,
) -> float:
    """Cross-entropy of the untouched model on a labeled patch set."""
    class_index = {c: i for i, c in enumerate(prompts.classes)}
    tokens = adapted.backbone.tokenize(prompts.as_list())
    pixels = torch.stack([adapted.backbone.preprocess(p.pixels) for p in patches])
    labels = torch.tensor([class_index[p.label] for p in patches], dtype=torch.long)
    loss, _ = _validation_pass(adapted, tokens, pixels, labels)
    return loss


# --- checkpoints ------------------------------------------------------------

def save_delta(adapted: AdaptedModel, path: str | Path, fingerprint: str = "") -> None:
    """Persist only the strategy's trainable tensors (plus head buffers)."""
    n_classes = None
    if adapted.head is not None:
        last = [m for m in adapted.head.modules() if isinstance(m, nn.Linear)][-1]
        n_classes = last.out_features
    torch.save(
        {
            "strategy": adapted.strategy,
            "config": asdict(adapted.config),
            "n_classes": n_classes,
            "fingerprint": fingerprint,
            "tensors": _snapshot(adapted),
        },
        path,
    )


def load_delta(
    model: DualEncoderBackbone, path: str | Path, n_classes: Optional[int] = None
) -> AdaptedModel:
    """Rebuild an adapted model from a base backbone plus a delta file."""
    payload = torch.load(path, weights_only=False)
    cfg_dict = dict(payload["config"])
    cfg_dict["lora_targets"] = tuple(cfg_dict["lora_targets"])
    cfg = AdaptationConfig(**cfg_dict)
    adapted = apply_strategy(model, cfg, n_classes or payload["n_classes"] or 0)
    _restore(adapted, payload["tensors"])
    adapted.eval_mode()
    return adapted
