"""Top-k candidate generation and best-of-k selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import DataError, ShapeError
from .generator import pad_sequences

log = logging.getLogger(__name__)

StepFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class Candidate:
    tokens: tuple[int, ...]
    text: str
    logprob: float
    embedding: torch.Tensor | None = None
    reward: object | None = None  # RewardScore once scored


@dataclass
class CandidateSet:
    candidates: list[Candidate]
    anchor_index: int | None = None
    exhausted: bool = False  # fewer than k distinct hypotheses were found

    def __len__(self):
        return len(self.candidates)

    @property
    def anchor(self) -> Candidate:
        if self.anchor_index is None:
            raise DataError("candidate set has no anchor yet")
        return self.candidates[self.anchor_index]


@dataclass
class _Hyps:
    alive: list = field(default_factory=lambda: [((), 0.0)])
    finished: list = field(default_factory=list)
    done: bool = False


def beam_search(step_fn: StepFn, n_items: int, k: int, max_len: int, bos_id: int, eos_id: int):
    """Batched beam search with ``k`` beams per item.

    ``step_fn(prefixes, item_index)`` returns next-token log-probs (N, V) for
    BOS-led prefixes (N, t) belonging to items ``item_index`` (N,).

    Each step ranks every expansion of the live beams; EOS expansions that
    land in the top k are finished, and the best k non-EOS expansions stay
    alive. Beams still alive after ``max_len`` tokens are finished as
    truncated. An item stops once k finished hypotheses outscore every live
    beam. With k = 1 this is greedy decoding.

    Returns, per item, up to k ``(tokens, logprob)`` pairs sorted by
    descending log-prob (tokens include the closing EOS when present).
    """
    if k < 1 or max_len < 1:
        raise ValueError("k and max_len must be >= 1")
    state = [_Hyps() for _ in range(n_items)]
    for step in range(max_len):
        rows = [(i, toks, score) for i, h in enumerate(state) if not h.done for toks, score in h.alive]
        if not rows:
            break
        prefixes = torch.tensor([[bos_id, *toks] for _, toks, _ in rows], dtype=torch.long)
        items = torch.tensor([i for i, _, _ in rows], dtype=torch.long)
        logp = step_fn(prefixes, items).detach().to(torch.float64).cpu()
        total = logp + torch.tensor([s for _, _, s in rows], dtype=torch.float64)[:, None]
        V = total.shape[1]

        start = 0
        for i, h in enumerate(state):
            if h.done:
                continue
            n_rows = len(h.alive)
            block = total[start:start + n_rows].reshape(-1)
            start += n_rows
            order = torch.sort(block, descending=True, stable=True).indices[: 2 * k].tolist()
            alive = []
            for rank, flat in enumerate(order):
                score = block[flat].item()
                if not math.isfinite(score):
                    break
                row, tok = divmod(flat, V)
                toks = h.alive[row][0] + (tok,)
                if tok == eos_id:
                    if rank < k:
                        h.finished.append((toks, score))
                elif len(alive) < k:
                    alive.append((toks, score))
            if step == max_len - 1:
                h.finished.extend(alive)
                alive = []
            h.alive = alive
            h.finished.sort(key=lambda ts: -ts[1])
            if not h.alive or (len(h.finished) >= k and h.finished[k - 1][1] >= h.alive[0][1]):
                h.done = True
    return [h.finished[:k] for h in state]


def model_step_fn(model, memory, memory_mask) -> StepFn:
    def step(prefixes, items):
        return model.next_token_logprobs(memory.index_select(0, items), memory_mask.index_select(0, items), prefixes)
    return step


def candidate_embedding(states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of decoder states over non-PAD positions, L2-normalised.

    Accepts (T, d) with mask (T,) or batched (B, T, d) with (B, T).
    """
    mask = mask.to(states.dtype)
    counts = mask.sum(-1, keepdim=True)
    if (counts == 0).any():
        raise ShapeError("candidate has no non-PAD decoder states")
    mean = (states * mask.unsqueeze(-1)).sum(-2) / counts
    return F.normalize(mean, dim=-1, eps=1e-12)


def teacher_forced_candidates(model, memory, memory_mask, token_lists, owner):
    """Teacher-forced pass over candidates; ``owner[j]`` is the memory row of candidate j.

    Returns per-candidate summed log-probs (N,) and embeddings (N, d), both
    differentiable.
    """
    targets = pad_sequences(token_lists, model.pad_id).to(memory.device)
    idx = torch.as_tensor(owner, dtype=torch.long, device=memory.device)
    tok_lp, hidden, mask = model.teacher_forced(memory.index_select(0, idx), memory_mask.index_select(0, idx), targets)
    return tok_lp.sum(-1), candidate_embedding(hidden, mask)


def sequence_logprob(model, memory, memory_mask, tokens: Sequence[int]) -> torch.Tensor:
    """Teacher-forced log P(tokens | context) for a single item (memory batch of 1)."""
    if not tokens:
        raise DataError("cannot score an empty token sequence")
    for t in tokens:
        if not 0 <= int(t) < model.vocab_size:
            raise DataError(f"token id {t} outside vocabulary of size {model.vocab_size}")
    lp, _ = teacher_forced_candidates(model, memory, memory_mask, [list(tokens)], [0])
    return lp[0]


def generate_topk(model, memory, memory_mask, vocab, k: int = 5, max_len: int = 64,
                  with_embeddings: bool = True) -> list[CandidateSet]:
    """Beam-decode k candidates for every row of ``memory``."""
    with torch.no_grad():
        beams = beam_search(model_step_fn(model, memory, memory_mask), memory.shape[0], k, max_len,
                            model.bos_id, model.eos_id)
        sets = []
        for hyps in beams:
            cands = [Candidate(tokens=toks, text=vocab.decode(toks), logprob=score) for toks, score in hyps]
            sets.append(CandidateSet(cands, exhausted=len(cands) < k))
        if with_embeddings:
            flat = [(i, c) for i, s in enumerate(sets) for c in s.candidates]
            if flat:
                _, emb = teacher_forced_candidates(model, memory, memory_mask,
                                                   [c.tokens for _, c in flat], [i for i, _ in flat])
                for (_, c), e in zip(flat, emb):
                    c.embedding = e
    for i, s in enumerate(sets):
        if s.exhausted:
            log.warning("item %d: only %d distinct hypotheses for k=%d", i, len(s), k)
    return sets


def sample_candidates(model, memory, memory_mask, vocab, k: int, max_len: int, seed: int,
                      max_attempts: int | None = None) -> list[CandidateSet]:
    """Ancestral sampling alternative to beam search: k distinct samples per item."""
    gen = torch.Generator().manual_seed(seed)
    max_attempts = max_attempts or 4 * k
    sets = []
    with torch.no_grad():
        for i in range(memory.shape[0]):
            mem, mask = memory[i:i + 1], memory_mask[i:i + 1]
            seen: dict[tuple, float] = {}
            for _ in range(max_attempts):
                if len(seen) >= k:
                    break
                toks, total = [], 0.0
                for _ in range(max_len):
                    prefix = torch.tensor([[model.bos_id, *toks]])
                    lp = model.next_token_logprobs(mem, mask, prefix)[0]
                    tok = int(torch.multinomial(lp.exp(), 1, generator=gen))
                    toks.append(tok)
                    total += float(lp[tok])
                    if tok == model.eos_id:
                        break
                seen.setdefault(tuple(toks), total)
            ranked = sorted(seen.items(), key=lambda kv: -kv[1])
            cands = [Candidate(tokens=t, text=vocab.decode(t), logprob=s) for t, s in ranked]
            sets.append(CandidateSet(cands, exhausted=len(cands) < k))
    return sets


def select_best(cset: CandidateSet, reward_fn=None) -> int:
    """Set and return the anchor: highest reward, then higher log-prob, then lower index.

    ``reward_fn(candidate)`` returns a RewardScore (or a float); when given,
    every candidate is (re)scored and the score stored on it.
    """
    if not cset.candidates:
        raise DataError("cannot select from an empty candidate set")
    if reward_fn is not None:
        for c in cset.candidates:
            c.reward = reward_fn(c)
    values = [_reward_value(c) for c in cset.candidates]
    best = max(range(len(values)), key=lambda i: (values[i], cset.candidates[i].logprob, -i))
    cset.anchor_index = best
    return best


def _reward_value(c: Candidate) -> float:
    if c.reward is None:
        raise DataError("candidate has not been scored")
    return float(getattr(c.reward, "value", c.reward))
