"""Joint image/text encoder producing a [CLS] vector and per-token embeddings.

A small pre-norm transformer over ``[CLS] + patches + prompt tokens``. It
stands in for a pretrained vision-language encoder; the weights are learned
from scratch together with the generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, mem, key_mask=None, causal=False):
        # key_mask: (B, S) bool, True where the key is real
        B, T, d = x.shape
        S = mem.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        q = self.q(x).view(B, T, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, S, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, S, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(T, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, T, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int):
        super().__init__()
        self.up = nn.Linear(d_model, ff_dim)
        self.down = nn.Linear(ff_dim, d_model)

    def forward(self, x):
        # GELU keeps the loss smooth for finite-difference checks
        return self.down(F.gelu(self.up(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_dim):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim)

    def forward(self, x, mask):
        y = self.ln1(x)
        x = x + self.attn(y, y, mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_dim):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, n_heads)
        self.ln3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim)

    def forward(self, x, self_mask, mem, mem_mask):
        y = self.ln1(x)
        x = x + self.self_attn(y, y, self_mask, causal=True)
        x = x + self.cross_attn(self.ln2(x), mem, mem_mask)
        return x + self.ff(self.ln3(x))


@dataclass
class FusedRepresentation:
    cls: torch.Tensor               # (B, d)
    token_embeddings: torch.Tensor  # (B, L, d)
    token_mask: torch.Tensor        # (B, L) bool


class FusionEncoder(nn.Module):
    CLS_TYPE, IMAGE_TYPE, TEXT_TYPE = 0, 1, 2

    def __init__(self, vocab_size, d_model=64, n_heads=2, n_layers=2, ff_dim=256,
                 max_tokens=256, n_patches=8, pad_id=0):
        super().__init__()
        self.d_model = d_model
        self.max_tokens = max_tokens
        self.n_patches = n_patches
        self.pad_id = pad_id
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.text_pos = nn.Embedding(max_tokens, d_model)
        self.patch_pos = nn.Embedding(n_patches, d_model)
        self.type_emb = nn.Embedding(3, d_model)
        self.cls = nn.Parameter(torch.randn(d_model) * 0.02)
        self.layers = nn.ModuleList(EncoderBlock(d_model, n_heads, ff_dim) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)

    def forward(self, image, image_mask, prompt_ids) -> FusedRepresentation:
        """Encode a batch.

        image: (B, P, d) float; image_mask: (B, P) bool; prompt_ids: (B, L) long,
        PAD-padded on the right.
        """
        B, P, d = image.shape
        L = prompt_ids.shape[1]
        if d != self.d_model:
            raise ShapeError(f"image feature dim {d} != model dim {self.d_model}")
        if P > self.n_patches:
            raise ShapeError(f"{P} patches exceed the configured maximum {self.n_patches}")
        if L < 1 or L > self.max_tokens:
            raise ShapeError(f"prompt length {L} outside [1, {self.max_tokens}]")
        if not torch.isfinite(image).all():
            raise NumericError("non-finite image features")

        device = image.device
        cls = (self.cls + self.type_emb.weight[self.CLS_TYPE]).expand(B, 1, d)
        patches = image + self.patch_pos(torch.arange(P, device=device)) + self.type_emb.weight[self.IMAGE_TYPE]
        text = (self.tok_emb(prompt_ids) + self.text_pos(torch.arange(L, device=device))
                + self.type_emb.weight[self.TEXT_TYPE])
        x = torch.cat([cls, patches, text], dim=1)
        text_mask = prompt_ids != self.pad_id
        mask = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=device), image_mask, text_mask], dim=1)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm(x)
        return FusedRepresentation(cls=x[:, 0], token_embeddings=x[:, 1 + P:], token_mask=text_mask)


def assemble_decoder_context(fused: FusedRepresentation, use_cls: bool = True):
    """Decoder context: optional [CLS] vector prepended to the prompt token embeddings.

    Returns ``(context, mask)`` with shapes (B, L[+1], d) and (B, L[+1]).
    """
    if not use_cls:
        return fused.token_embeddings, fused.token_mask
    B = fused.cls.shape[0]
    ctx = torch.cat([fused.cls[:, None, :], fused.token_embeddings], dim=1)
    mask = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=ctx.device), fused.token_mask], dim=1)
    return ctx, mask
