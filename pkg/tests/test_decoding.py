import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sarcgen.decoding import (Candidate, CandidateSet, beam_search, candidate_embedding, generate_topk,
                              sample_candidates, select_best, sequence_logprob)
from sarcgen.errors import DataError, ShapeError

from conftest import random_inputs, tiny_model

PAD, BOS, EOS = 0, 1, 2
EMIT = (2, 3, 4)  # EOS plus two word tokens
V = 5


def table_step_fn(seed, n_items=1):
    """Prefix-dependent next-token distributions over EMIT, drawn once per (item, prefix)."""
    rng = np.random.default_rng(seed)
    cache = {}

    def dist(item, prefix):
        key = (item, prefix)
        if key not in cache:
            logits = rng.standard_normal(len(EMIT)) * 2
            lp = np.full(V, -np.inf)
            lp[list(EMIT)] = logits - np.logaddexp.reduce(logits)
            cache[key] = lp
        return cache[key]

    def step(prefixes, items):
        rows = [dist(int(i), tuple(p[1:].tolist())) for p, i in zip(prefixes, items)]
        return torch.tensor(np.stack(rows))

    return step, dist


def enumerate_sequences(dist, item, max_len):
    """Every finished sequence: EOS-terminated of length <= max_len, or truncated at max_len."""
    out = []
    for length in range(1, max_len + 1):
        for body in itertools.product(EMIT[1:], repeat=length - 1):
            for last in EMIT:
                toks = body + (last,)
                if last != EOS and length < max_len:
                    continue
                score = sum(dist(item, toks[:j])[toks[j]] for j in range(length))
                out.append((toks, score))
    return sorted(out, key=lambda ts: -ts[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 3), (2, 5), (3, 15)]))
def test_beam_matches_enumeration(seed, setting):
    max_len, k = setting
    step, dist = table_step_fn(seed, n_items=2)
    beams = beam_search(step, 2, k, max_len, BOS, EOS)
    for item in range(2):
        oracle = enumerate_sequences(dist, item, max_len)[:k]
        got = beams[item]
        assert [t for t, _ in got] == [t for t, _ in oracle]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in oracle], rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_k1_equals_greedy(seed, max_len):
    step, dist = table_step_fn(seed)
    toks, score = (), 0.0
    for _ in range(max_len):
        lp = dist(0, toks)
        tok = int(np.argmax(lp))
        toks, score = toks + (tok,), score + lp[tok]
        if tok == EOS:
            break
    [[(got, got_score)]] = beam_search(step, 1, 1, max_len, BOS, EOS)
    assert got == toks
    assert got_score == pytest.approx(score, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 5))
def test_beams_are_sorted_distinct_and_bounded(seed, k, max_len):
    step, _ = table_step_fn(seed)
    [hyps] = beam_search(step, 1, k, max_len, BOS, EOS)
    scores = [s for _, s in hyps]
    assert scores == sorted(scores, reverse=True)
    assert len({t for t, _ in hyps}) == len(hyps) <= k
    assert all(1 <= len(t) <= max_len for t, _ in hyps)
    assert all(EOS not in t[:-1] for t, _ in hyps)


def test_model_candidates_logprob_consistent_and_normalised(vocab, model):
    model.eval()
    x = random_inputs(2, vocab_size=len(vocab))
    mem, mask = model.memory(x)
    sets = generate_topk(model, mem, mask, vocab, k=4, max_len=5)
    for i, cset in enumerate(sets):
        lps = [c.logprob for c in cset.candidates]
        assert lps == sorted(lps, reverse=True)
        for c in cset.candidates:
            assert PAD not in c.tokens and BOS not in c.tokens
            tf = sequence_logprob(model, mem[i:i + 1], mask[i:i + 1], c.tokens).item()
            assert tf == pytest.approx(c.logprob, abs=1e-9)
            assert c.embedding.norm().item() == pytest.approx(1.0, abs=1e-9)


def test_uniform_model_scores_minus_t_log_emittable(vocab, model):
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    x = random_inputs(1, vocab_size=len(vocab))
    mem, mask = model.memory(x)
    [cset] = generate_topk(model, mem, mask, vocab, k=3, max_len=4)
    n_emit = len(vocab) - 2
    for c in cset.candidates:
        assert c.logprob == pytest.approx(-len(c.tokens) * math.log(n_emit), abs=1e-9)


def test_sampling_is_seeded(vocab, model):
    x = random_inputs(2, vocab_size=len(vocab))
    mem, mask = model.memory(x)
    a = sample_candidates(model, mem, mask, vocab, k=3, max_len=4, seed=5)
    b = sample_candidates(model, mem, mask, vocab, k=3, max_len=4, seed=5)
    assert [[c.tokens for c in s.candidates] for s in a] == [[c.tokens for c in s.candidates] for s in b]


def test_sequence_logprob_rejects_bad_tokens(vocab, model):
    x = random_inputs(1, vocab_size=len(vocab))
    mem, mask = model.memory(x)
    with pytest.raises(DataError):
        sequence_logprob(model, mem, mask, [])
    with pytest.raises(DataError):
        sequence_logprob(model, mem, mask, [len(vocab)])


def test_candidate_embedding():
    states = torch.tensor([[3.0, 4.0], [1.0, 0.0], [100.0, 100.0]])
    mask = torch.tensor([True, True, False])
    emb = candidate_embedding(states, mask)
    torch.testing.assert_close(emb, torch.tensor([4.0, 4.0]) / math.sqrt(32))
    with pytest.raises(ShapeError):
        candidate_embedding(states, torch.zeros(3, dtype=torch.bool))


def _cset(rewards, logprobs):
    return CandidateSet([Candidate((i,), str(i), lp, reward=r) for i, (r, lp) in enumerate(zip(rewards, logprobs))])


def test_select_best_tie_breaks():
    assert select_best(_cset([0.2, 0.9, 0.5], [0, -5, -1])) == 1
    assert select_best(_cset([0.9, 0.9, 0.1], [-3.0, -1.0, 0.0])) == 1
    assert select_best(_cset([0.9, 0.9], [-1.0, -1.0])) == 0
    with pytest.raises(DataError):
        select_best(CandidateSet([]))


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-20, 0)), min_size=1, max_size=8))
def test_select_best_invariant_to_monotone_reward_transform(pairs):
    rewards, lps = zip(*pairs)
    a = select_best(_cset(rewards, lps))
    ranks = {r: i for i, r in enumerate(sorted(set(rewards)))}
    b = select_best(_cset([ranks[r] / 8 for r in rewards], lps))
    c = select_best(_cset([r * 0.5 for r in rewards], lps))
    assert a == b == c


def test_select_best_with_reward_fn_stores_scores():
    cset = _cset([None, None], [-1.0, -2.0])
    assert select_best(cset, lambda c: 1.0 if c.text == "1" else 0.0) == 1
    assert cset.anchor.text == "1"
