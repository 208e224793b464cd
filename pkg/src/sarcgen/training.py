"""Training loop combining CE, contrastive and policy losses."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import EncodedSample, chunks, collate, encode_samples
from .decoding import CandidateSet, generate_topk, select_best, teacher_forced_candidates
from .errors import ConfigError, DataError, NumericError, ScorerUnavailableError
from .generator import ModelConfig, SarcasmGenerator
from .losses import (LossWeights, ReferencePolicy, ce_loss, combine_losses, contrastive_loss,
                     kl_term, lambda_ppo_at, ppo_loss)
from .prompts import PromptConfig, build_prompt
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sarcgen-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 100
    k: int = 5
    max_tokens: int = 256
    gen_max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "warmup_steps", "k", "max_tokens", "gen_max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    ce: float
    cl: float
    ppo: float
    total: float
    mean_reward: float | None
    mean_kl: float | None
    lambda_ppo: float
    lr: float


@dataclass
class TrainResult:
    model: SarcasmGenerator
    reference: ReferencePolicy
    vocab: Vocabulary
    log: list[TrainLogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def build_vocabulary(samples, prompt_config: PromptConfig) -> Vocabulary:
    texts = []
    for s in samples:
        texts.append(s.text)
        texts.append(build_prompt(s, prompt_config).text)
    return Vocabulary.build(texts)


def new_model(vocab: Vocabulary, model_config: ModelConfig, seed: int, dtype=torch.float32) -> SarcasmGenerator:
    torch.manual_seed(seed)
    model = SarcasmGenerator(len(vocab), model_config, vocab.pad_id, vocab.bos_id, vocab.eos_id)
    return model.to(dtype)


def warmup_factor(step: int, warmup_steps: int) -> float:
    return min(1.0, (step + 1) / warmup_steps)


class Trainer:
    """Owns the live generator, its EMA reference and the optimiser.

    ``generate_when_idle`` forces candidate generation and scoring even when
    both policy and contrastive weights are identically zero.
    """

    def __init__(self, model: SarcasmGenerator, vocab: Vocabulary, scorer, train_config: TrainConfig,
                 weights: LossWeights, generate_when_idle: bool = False):
        self.model = model
        self.vocab = vocab
        self.scorer = scorer
        self.config = train_config
        self.weights = weights
        self.generate_when_idle = generate_when_idle
        self.reference = ReferencePolicy(model, weights.momentum)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr)
        self.step = 0
        if weights.lambda_cl > 0 and train_config.k < 2:
            raise ConfigError("train.k", "contrastive loss needs k >= 2")

    @property
    def uses_candidates(self) -> bool:
        return self.generate_when_idle or not self.weights.ce_only

    def lr_at(self, step: int) -> float:
        return self.config.lr * warmup_factor(step, self.config.warmup_steps)

    def score_sets(self, sets: list[CandidateSet], batch: list[EncodedSample]) -> None:
        for cset, sample in zip(sets, batch):
            texts = [c.text or " " for c in cset.candidates]
            try:
                scores = self.scorer.score_batch(texts, [sample.image_ref] * len(texts))
            except ScorerUnavailableError:
                log.error("scorer failed at step %d", self.step)
                raise
            for c, s in zip(cset.candidates, scores):
                c.reward = s
            select_best(cset)

    def losses(self, batch: list[EncodedSample], lambda_ppo: float, candidate_sets=None):
        """Compute loss components for one batch.

        Returns ``(total, parts)`` where parts holds ce/cl/ppo tensors and the
        mean reward and KL of the policy-loss candidates. ``candidate_sets``
        may be supplied to bypass generation (e.g. for gradient checks).
        """
        model, w = self.model, self.weights
        dtype = next(model.parameters()).dtype
        inputs, targets = collate(batch, dtype=dtype)
        memory, mmask = model.memory(inputs)
        ce = ce_loss(model, memory, mmask, targets)
        zero = ce.new_zeros(())
        parts = {"ce": ce, "cl": zero, "ppo": zero, "mean_reward": None, "mean_kl": None}

        if candidate_sets is None and self.uses_candidates:
            model.eval()
            candidate_sets = generate_topk(model, memory.detach(), mmask, self.vocab, self.config.k,
                                           self.config.gen_max_len, with_embeddings=False)
            model.train()
            self.score_sets(candidate_sets, batch)

        if candidate_sets is not None:
            flat, owners = [], []
            for i, cset in enumerate(candidate_sets):
                for c in cset.candidates:
                    flat.append(c.tokens)
                    owners.append(i)
            live_lp, emb = teacher_forced_candidates(model, memory, mmask, flat, owners)
            with torch.no_grad():
                ref_memory, ref_mask = self.reference.model.memory(inputs)
                ref_lp, _ = teacher_forced_candidates(self.reference.model, ref_memory, ref_mask, flat, owners)

            cl_terms, policy_idx, rewards = [], [], []
            offset = 0
            for cset in candidate_sets:
                n = len(cset.candidates)
                a = offset + cset.anchor_index
                if n >= 2:
                    negatives = [offset + j for j in range(n) if j != cset.anchor_index]
                    cl_terms.append(contrastive_loss(emb[a], emb[negatives], w.tau, w.infonce))
                chosen = range(n) if w.ppo_all_candidates else [cset.anchor_index]
                for j in chosen:
                    policy_idx.append(offset + j)
                    rewards.append(cset.candidates[j].reward.value)
                offset += n
            if cl_terms:
                parts["cl"] = torch.stack(cl_terms).mean()
            idx = torch.tensor(policy_idx, dtype=torch.long)
            reward_t = torch.tensor(rewards, dtype=dtype)
            parts["ppo"] = ppo_loss(reward_t, live_lp[idx], ref_lp[idx], w.beta)
            parts["mean_reward"] = float(reward_t.mean())
            parts["mean_kl"] = kl_term(live_lp[idx], ref_lp[idx]).mean().item()

        total = combine_losses(parts["ce"], parts["ppo"], parts["cl"], lambda_ppo, w.lambda_cl)
        return total, parts

    def train_step(self, batch: list[EncodedSample], epoch: int, schedule) -> TrainLogRecord:
        lam = lambda_ppo_at(self.step, schedule)
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        total, parts = self.losses(batch, lam)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss at step {self.step}: {parts}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.reference.update(self.model)
        record = TrainLogRecord(
            step=self.step, epoch=epoch, ce=parts["ce"].item(), cl=parts["cl"].item(),
            ppo=parts["ppo"].item(), total=total.item(), mean_reward=parts["mean_reward"],
            mean_kl=parts["mean_kl"], lambda_ppo=lam, lr=lr)
        self.step += 1
        return record

    def fit(self, encoded: list[EncodedSample], out_dir=None, run_config: dict | None = None,
            log_path=None) -> TrainResult:
        cfg = self.config
        steps_per_epoch = math.ceil(len(encoded) / cfg.batch_size)
        schedule = self.weights.lambda_ppo.resolve(cfg.epochs * steps_per_epoch)
        rng = np.random.default_rng(cfg.seed)
        result = TrainResult(self.model, self.reference, self.vocab)
        out = Path(out_dir) if out_dir else None
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(encoded))
                for idx in chunks(order.tolist(), cfg.batch_size):
                    record = self.train_step([encoded[i] for i in idx], epoch, schedule)
                    result.log.append(record)
                    if log_fh:
                        log_fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
                log.info("epoch %d: ce=%.4f reward=%s", epoch, record.ce, record.mean_reward)
                if out is not None:
                    path = out / "checkpoints" / f"epoch-{epoch + 1:03d}.pt"
                    self.save_checkpoint(path, run_config or {}, epoch + 1)
                    result.checkpoints.append(path)
        finally:
            if log_fh:
                log_fh.close()
        return result

    def save_checkpoint(self, path, run_config: dict, epoch: int) -> None:
        save_checkpoint(path, self.model, self.reference, self.vocab, run_config, self.step, epoch)


def save_checkpoint(path, model, reference, vocab, run_config: dict, step: int, epoch: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "epoch": epoch,
        "config": run_config,
        "model_config": asdict(model.config),
        "vocab": vocab.itos,
        "model": model.state_dict(),
        "reference": reference.model.state_dict() if reference is not None else None,
    }, path)


def load_checkpoint(path):
    """Returns ``(model, vocab, payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise DataError(f"{path}: unreadable checkpoint: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    vocab = Vocabulary(payload["vocab"][4:])
    model = SarcasmGenerator(len(vocab), ModelConfig(**payload["model_config"]),
                             vocab.pad_id, vocab.bos_id, vocab.eos_id)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, vocab, payload


def train(samples, scorer, train_config: TrainConfig, weights: LossWeights,
          model_config: ModelConfig = ModelConfig(), prompt_config: PromptConfig = PromptConfig(),
          features=None, out_dir=None, run_config: dict | None = None,
          generate_when_idle: bool = False) -> TrainResult:
    """Build a vocabulary, initialise a generator and train it on ``samples``."""
    from .features import FeatureStore

    features = features or FeatureStore(None, model_config.n_patches, model_config.d_model)
    vocab = build_vocabulary(samples, prompt_config)
    model_config = ModelConfig(**{**asdict(model_config), "max_tokens": train_config.max_tokens})
    model = new_model(vocab, model_config, train_config.seed)
    encoded = encode_samples(samples, vocab, features, prompt_config, train_config.max_tokens)
    trainer = Trainer(model, vocab, scorer, train_config, weights, generate_when_idle)
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.json")
    result = trainer.fit(encoded, out, run_config, out / "train_log.jsonl" if out else None)
    if out is not None:
        trainer.save_checkpoint(out / "model.pt", run_config or {}, train_config.epochs)
        result.checkpoints.append(out / "model.pt")
    return result
