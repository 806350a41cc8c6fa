"""Bundled toy dual encoder.

A small randomly initialized vision transformer + text transformer pair with a
shared 32-d embedding space. It makes the whole harness runnable and testable
on a laptop CPU without downloading pretrained weights: same structure as the
real backbones (blocks with q/k/v/out attention projections, an MLP sublayer,
per-tower projection heads, a learned logit scale), just tiny.

The learned logit scale starts at exp(0)=1 so an untrained model produces
near-uniform class probabilities.
"""

from __future__ import annotations

import re
import zlib
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .encoder import BackboneDescriptor, DualEncoderBackbone


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        assert width % heads == 0
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, w = x.shape
        def split(t):
            return t.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, w)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = Mlp(width, int(width * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class ToyImageTower(nn.Module):
    def __init__(self, width: int, depth: int, heads: int, input_size: int, patch_size: int):
        super().__init__()
        assert input_size % patch_size == 0
        n_patches = (input_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.empty(1, n_patches + 1, width).normal_(std=0.02))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(pixels).flatten(2).transpose(1, 2)  # B, P, W
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x[:, 0])


class ToyTextTower(nn.Module):
    def __init__(self, width: int, depth: int, heads: int, vocab_size: int, max_tokens: int):
        super().__init__()
        self.token_embed = nn.Embedding(vocab_size, width, padding_idx=0)
        self.pos_embed = nn.Parameter(torch.empty(1, max_tokens, width).normal_(std=0.02))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.token_embed(tokens) + self.pos_embed[:, : tokens.shape[1]]
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        mask = (tokens != 0).unsqueeze(-1).float()
        return (x * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)


class ToyDualEncoder(DualEncoderBackbone):
    def __init__(
        self,
        embed_dim: int,
        width: int,
        depth: int,
        heads: int,
        input_size: int,
        patch_size: int,
        vocab_size: int,
        max_tokens: int,
        name: str = "toy",
    ):
        super().__init__()
        self.descriptor = BackboneDescriptor(
            name=name,
            embed_dim=embed_dim,
            input_size=input_size,
            has_learned_logit_scale=True,
            architecture_family="dual-contrastive",
        )
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.image_tower = ToyImageTower(width, depth, heads, input_size, patch_size)
        self.text_tower = ToyTextTower(width, depth, heads, vocab_size, max_tokens)
        self.image_projection = nn.Linear(width, embed_dim, bias=False)
        self.text_projection = nn.Linear(width, embed_dim, bias=False)
        self.logit_scale = nn.Parameter(torch.zeros(()))

    def preprocess(self, pixels: np.ndarray) -> torch.Tensor:
        size = self.descriptor.input_size
        img = Image.fromarray(pixels)
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = (arr - 0.5) / 0.5
        return torch.from_numpy(arr).permute(2, 0, 1)

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        out = torch.zeros(len(texts), self.max_tokens, dtype=torch.long)
        for row, text in enumerate(texts):
            ids = [1]  # BOS
            for word in re.split(r"[^0-9a-z]+", text.lower()):
                if word:
                    ids.append(2 + zlib.crc32(word.encode()) % (self.vocab_size - 2))
            ids = ids[: self.max_tokens]
            out[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return out

    def encode_image_features(self, pixel_batch: torch.Tensor) -> torch.Tensor:
        return self.image_projection(self.image_tower(pixel_batch))

    def encode_text_features(self, token_batch: torch.Tensor) -> torch.Tensor:
        return self.text_projection(self.text_tower(token_batch))

    def blocks(self, side: str) -> nn.ModuleList:
        if side == "image":
            return self.image_tower.blocks
        if side == "text":
            return self.text_tower.blocks
        raise ValueError(f"side must be image|text, got {side!r}")

    def projection(self, side: str) -> nn.Module:
        if side == "image":
            return self.image_projection
        if side == "text":
            return self.text_projection
        raise ValueError(f"side must be image|text, got {side!r}")


def build_toy_backbone(
    seed: int = 0,
    embed_dim: int = 32,
    width: int = 64,
    depth: int = 4,
    heads: int = 4,
    input_size: int = 32,
    patch_size: int = 16,
    vocab_size: int = 256,
    max_tokens: int = 12,
) -> ToyDualEncoder:
    """Construct the toy backbone with a fixed initialization seed."""
    torch.manual_seed(seed)
    model = ToyDualEncoder(
        embed_dim=embed_dim,
        width=width,
        depth=depth,
        heads=heads,
        input_size=input_size,
        patch_size=patch_size,
        vocab_size=vocab_size,
        max_tokens=max_tokens,
    )
    model.eval()
    return model
