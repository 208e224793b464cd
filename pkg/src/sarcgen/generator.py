"""Sequence-to-sequence generator over the fused multimodal context."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .fusion import DecoderBlock, EncoderBlock, FusedRepresentation, FusionEncoder, assemble_decoder_context


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    fusion_layers: int = 2
    context_layers: int = 1
    decoder_layers: int = 2
    ff_dim: int = 256
    max_tokens: int = 256
    n_patches: int = 8
    use_cls: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_heads", "ff_dim", "max_tokens", "n_patches", "decoder_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("fusion_layers", "context_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads", f"must divide d_model ({self.d_model})")


@dataclass
class EncoderInput:
    image: torch.Tensor        # (B, P, d)
    image_mask: torch.Tensor   # (B, P)
    prompt_ids: torch.Tensor   # (B, L)

    def __len__(self):
        return self.image.shape[0]


def pad_sequences(seqs, pad_id=0, dtype=torch.long) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=dtype)
    return out


def make_encoder_input(grids, prompt_ids, pad_id=0, dtype=torch.float32) -> EncoderInput:
    """Collate per-sample (P_i, d) grids and prompt id lists into padded tensors."""
    if len(grids) != len(prompt_ids):
        raise ShapeError("grids and prompts differ in batch size")
    P = max(g.shape[0] for g in grids)
    d = grids[0].shape[1]
    image = torch.zeros(len(grids), P, d, dtype=dtype)
    image_mask = torch.zeros(len(grids), P, dtype=torch.bool)
    for i, g in enumerate(grids):
        if g.shape[1] != d:
            raise ShapeError("image grids in a batch must share their feature dimension")
        image[i, : g.shape[0]] = torch.as_tensor(np.asarray(g), dtype=dtype)
        image_mask[i, : g.shape[0]] = True
    return EncoderInput(image, image_mask, pad_sequences(prompt_ids, pad_id))


class SarcasmGenerator(nn.Module):
    """Fusion encoder, a context encoder over ``[CLS] + T'`` and an autoregressive decoder.

    PAD and BOS are never emitted: their logits are pinned to -inf.
    """

    def __init__(self, vocab_size: int, config: ModelConfig = ModelConfig(), pad_id=0, bos_id=1, eos_id=2):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.pad_id, self.bos_id, self.eos_id = pad_id, bos_id, eos_id
        c = config
        self.fusion = FusionEncoder(vocab_size, c.d_model, c.n_heads, c.fusion_layers, c.ff_dim,
                                    c.max_tokens, c.n_patches, pad_id)
        self.context_layers = nn.ModuleList(
            EncoderBlock(c.d_model, c.n_heads, c.ff_dim) for _ in range(c.context_layers))
        self.dec_emb = nn.Embedding(vocab_size, c.d_model)
        self.dec_pos = nn.Embedding(c.max_tokens + 1, c.d_model)
        self.dec_layers = nn.ModuleList(
            DecoderBlock(c.d_model, c.n_heads, c.ff_dim) for _ in range(c.decoder_layers))
        self.dec_norm = nn.LayerNorm(c.d_model)
        self.head = nn.Linear(c.d_model, vocab_size)
        blocked = torch.zeros(vocab_size)
        blocked[[pad_id, bos_id]] = float("-inf")
        self.register_buffer("logit_mask", blocked, persistent=False)

    def encode(self, inputs: EncoderInput) -> FusedRepresentation:
        return self.fusion(inputs.image, inputs.image_mask, inputs.prompt_ids)

    def memory(self, inputs: EncoderInput):
        """Context the decoder cross-attends to: ``(memory, mask)``."""
        ctx, mask = assemble_decoder_context(self.encode(inputs), self.config.use_cls)
        for layer in self.context_layers:
            ctx = layer(ctx, mask)
        return ctx, mask

    def decode(self, memory, memory_mask, dec_in):
        """Run the decoder on input ids (B, T); returns hidden states and log-probs."""
        T = dec_in.shape[1]
        if T > self.config.max_tokens + 1:
            raise ShapeError(f"decoder input length {T} exceeds {self.config.max_tokens + 1}")
        x = self.dec_emb(dec_in) + self.dec_pos(torch.arange(T, device=dec_in.device))
        for layer in self.dec_layers:
            x = layer(x, None, memory, memory_mask)
        hidden = self.dec_norm(x)
        logits = self.head(hidden) + self.logit_mask.to(hidden.dtype)
        return hidden, logits.log_softmax(-1)

    def teacher_forced(self, memory, memory_mask, targets):
        """Score padded target ids (B, T) under teacher forcing.

        Returns ``(token_logprobs, hidden, mask)``; token_logprobs is zero at
        PAD positions.
        """
        B = targets.shape[0]
        bos = torch.full((B, 1), self.bos_id, dtype=targets.dtype, device=targets.device)
        dec_in = torch.cat([bos, targets[:, :-1]], dim=1)
        hidden, logp = self.decode(memory, memory_mask, dec_in)
        mask = targets != self.pad_id
        # PAD has -inf log-prob; gather a finite entry there and zero it below
        safe = targets.masked_fill(~mask, self.eos_id)
        tok_lp = logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
        return tok_lp.masked_fill(~mask, 0.0), hidden, mask

    def next_token_logprobs(self, memory, memory_mask, prefixes):
        """Log-probabilities of the next token after BOS-led prefixes (N, t)."""
        _, logp = self.decode(memory, memory_mask, prefixes)
        return logp[:, -1]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
