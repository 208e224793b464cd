import numpy as np
import pytest
import torch

from sarcgen.corpus import Sample
from sarcgen.generator import ModelConfig, SarcasmGenerator, make_encoder_input
from sarcgen.tokenizer import Vocabulary

torch.set_num_threads(1)

TINY = ModelConfig(d_model=8, n_heads=2, fusion_layers=1, context_layers=1, decoder_layers=1,
                   ff_dim=16, max_tokens=32, n_patches=3)


@pytest.fixture
def vocab():
    return Vocabulary(["the", "target", "of", "sarcasm", "is", "x", ".", "write", "a", "sarcastic",
                       "comment", "based", "on", "this", "love", "hate", "so"])


def tiny_model(vocab_size, config=TINY, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return SarcasmGenerator(vocab_size, config).to(dtype)


@pytest.fixture
def model(vocab):
    return tiny_model(len(vocab))


def random_inputs(batch, config=TINY, vocab_size=21, prompt_len=5, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    grids = [rng.standard_normal((config.n_patches, config.d_model)) for _ in range(batch)]
    prompts = [list(rng.integers(4, vocab_size, size=prompt_len)) for _ in range(batch)]
    return make_encoder_input(grids, prompts, dtype=dtype)


def make_sample(i=0, text="oh monday love it.", target="monday mornings", score=0.8, **kw):
    return Sample(id=f"s{i}", text=text, target=target, image_ref=f"img{i}", sarcasm_score=score, **kw)


def central_difference_check(params, loss_fn, analytic, n_coords=2, eps=1e-6, seed=0):
    """Max relative error between ``analytic`` grads and central differences of ``loss_fn``.

    Relative error is |num - ana| / max(1, |num|, |ana|) on ``n_coords`` random
    coordinates of each parameter tensor.
    """
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat, gflat = p.data.view(-1), g.view(-1)
        for idx in torch.randperm(flat.numel(), generator=gen)[:n_coords].tolist():
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
            num, ana = (up - down) / (2 * eps), gflat[idx].item()
            worst = max(worst, abs(num - ana) / max(1.0, abs(num), abs(ana)))
    return worst


def gradient_check_setup(samples, beta, k=2, seed=0):
    """float64 trainer with injected candidate sets and a perturbed reference.

    Returns ``(trainer, total, frozen_loss)``: ``total()`` is the trainer's
    loss and ``frozen_loss()`` the same loss with the policy advantage held
    at its current value, i.e. the function whose true gradient the
    surrogate implements.
    """
    from sarcgen.data import encode_samples
    from sarcgen.decoding import Candidate, CandidateSet, select_best, teacher_forced_candidates
    from sarcgen.features import FeatureStore
    from sarcgen.losses import LossWeights
    from sarcgen.prompts import PromptConfig
    from sarcgen.rewards import SyntheticOracle
    from sarcgen.training import TrainConfig, Trainer, build_vocabulary, new_model

    cfg = ModelConfig(d_model=8, n_heads=2, fusion_layers=1, context_layers=1, decoder_layers=1,
                      ff_dim=16, max_tokens=64, n_patches=4)
    vocab = build_vocabulary(samples, PromptConfig())
    model = new_model(vocab, cfg, seed, torch.float64).eval()
    features = FeatureStore(None, cfg.n_patches, cfg.d_model)
    encoded = encode_samples(samples, vocab, features, PromptConfig(), cfg.max_tokens)
    oracle = SyntheticOracle()
    weights = LossWeights(lambda_cl=0.5, beta=beta, tau=0.5)
    trainer = Trainer(model, vocab, oracle, TrainConfig(k=k), weights)
    with torch.no_grad():
        for p in trainer.reference.model.parameters():
            p.mul_(0.9)
    rng = np.random.default_rng(seed)
    sets = []
    for s in encoded:
        token_lists = [tuple(s.target_ids)]
        while len(token_lists) < k:
            body = rng.integers(4, len(vocab), size=int(rng.integers(1, 5)))
            token_lists.append(tuple(body.tolist()) + (vocab.eos_id,))
        cands = [Candidate(t, vocab.decode(t), 0.0) for t in token_lists]
        for c in cands:
            c.reward = oracle.score(c.text or " ")
        cset = CandidateSet(cands)
        select_best(cset)
        sets.append(cset)
    lam = 0.8

    def anchor_logprobs(m):
        inputs = _collate(encoded, m)
        mem, mask = m.memory(inputs)
        lp, _ = teacher_forced_candidates(m, mem, mask, [c.anchor.tokens for c in sets], list(range(len(sets))))
        return lp

    with torch.no_grad():
        ref_lp = anchor_logprobs(trainer.reference.model)
        live_lp0 = anchor_logprobs(model)
        rewards = torch.tensor([c.anchor.reward.value for c in sets], dtype=torch.float64)
        advantage = rewards - beta * (live_lp0 - ref_lp)

    def total():
        return trainer.losses(encoded, lambda_ppo=lam, candidate_sets=sets)[0]

    def frozen_loss():
        t, parts = trainer.losses(encoded, lambda_ppo=lam, candidate_sets=sets)
        lp = anchor_logprobs(model)
        surrogate = (-advantage * lp + beta * (lp - ref_lp)).mean()
        return t - lam * parts["ppo"] + lam * surrogate

    return trainer, total, frozen_loss


def _collate(encoded, model):
    from sarcgen.data import collate
    return collate(encoded, dtype=next(model.parameters()).dtype)[0]


_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc is None else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{status}] criterion {self.number:>2}: {self.title}" + (f" ({detail})" if detail else "")
        self.lines.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda nl: nl[0]):
            terminalreporter.write_line(line)
