"""Turning samples into model inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .generator import EncoderInput, make_encoder_input, pad_sequences
from .prompts import PromptConfig, build_prompt


@dataclass
class EncodedSample:
    id: str
    image_ref: str
    grid: np.ndarray
    prompt_ids: list[int]
    target_ids: list[int]  # gold text ids ending in EOS


def encode_samples(samples, vocab, features, prompt_config: PromptConfig, max_tokens: int) -> list[EncodedSample]:
    out = []
    for s in samples:
        prompt = build_prompt(s, prompt_config)
        out.append(EncodedSample(
            id=s.id,
            image_ref=s.image_ref,
            grid=features.get(s.image_ref).grid,
            prompt_ids=vocab.encode(prompt.text, max_tokens),
            target_ids=vocab.encode(s.text, max_tokens, add_eos=True) if getattr(s, "text", None) else [],
        ))
    return out


def collate(batch: list[EncodedSample], dtype=torch.float32) -> tuple[EncoderInput, torch.Tensor]:
    inputs = make_encoder_input([b.grid for b in batch], [b.prompt_ids for b in batch], dtype=dtype)
    targets = pad_sequences([b.target_ids or [0] for b in batch])
    return inputs, targets


def chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]
