"""Best-of-k inference over encoded samples."""

from __future__ import annotations

import torch

from .data import chunks, collate
from .decoding import CandidateSet, generate_topk, sample_candidates, select_best


def best_of_k(model, vocab, encoded, scorer, k: int = 5, max_len: int = 64, batch_size: int = 32,
              sampling: bool = False, seed: int = 0) -> list[CandidateSet]:
    """Decode k candidates per sample, score them all and mark the anchor."""
    model.eval()
    out: list[CandidateSet] = []
    with torch.no_grad():
        for batch_no, batch in enumerate(chunks(encoded, batch_size)):
            inputs, _ = collate(batch, dtype=next(model.parameters()).dtype)
            memory, mask = model.memory(inputs)
            if sampling:
                sets = sample_candidates(model, memory, mask, vocab, k, max_len, seed + batch_no)
            else:
                sets = generate_topk(model, memory, mask, vocab, k, max_len, with_embeddings=False)
            for cset, sample in zip(sets, batch):
                texts = [c.text or " " for c in cset.candidates]
                for c, s in zip(cset.candidates, scorer.score_batch(texts, [sample.image_ref] * len(texts))):
                    c.reward = s
                select_best(cset)
            out.extend(sets)
    return out
