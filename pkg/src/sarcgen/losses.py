"""Training objectives: teacher-forced CE, anchor/negative contrastive loss,
reward-minus-KL policy loss against an EMA reference, and their weighting."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError, ShapeError


@dataclass
class LambdaSchedule:
    """Clamped linear ramp from ``start_value`` to ``end_value`` over [start_step, end_step].

    ``end_step=None`` means the last step of the run.
    """
    start_value: float = 0.0
    end_value: float = 1.0
    start_step: int = 0
    end_step: int | None = None

    def __post_init__(self):
        if self.start_step < 0:
            raise ConfigError("lambda_ppo_start_step", "must be >= 0")
        if self.end_step is not None and self.end_step < self.start_step:
            raise ConfigError("lambda_ppo_end_step", "must be >= lambda_ppo_start_step")

    def resolve(self, total_steps: int) -> "LambdaSchedule":
        if self.end_step is not None:
            return self
        return LambdaSchedule(self.start_value, self.end_value, self.start_step,
                              max(self.start_step, total_steps - 1))

    @property
    def is_zero(self) -> bool:
        return self.start_value == 0 and self.end_value == 0


def lambda_ppo_at(step: int, schedule: LambdaSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    end_step = schedule.start_step if schedule.end_step is None else schedule.end_step
    if step <= schedule.start_step:
        return schedule.start_value
    if step >= end_step:
        return schedule.end_value
    frac = (step - schedule.start_step) / (end_step - schedule.start_step)
    return schedule.start_value + frac * (schedule.end_value - schedule.start_value)


@dataclass
class LossWeights:
    lambda_cl: float = 0.5
    lambda_ppo: LambdaSchedule = field(default_factory=LambdaSchedule)
    beta: float = 0.1
    tau: float = 0.07
    momentum: float = 0.99
    infonce: bool = False           # include the positive in the contrastive denominator
    ppo_all_candidates: bool = False

    def __post_init__(self):
        if self.lambda_cl < 0:
            raise ConfigError("lambda_cl", "must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta", "must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau", "must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum", "must lie in [0, 1]")

    @property
    def ce_only(self) -> bool:
        return self.lambda_cl == 0 and self.lambda_ppo.is_zero


def ce_loss(model, memory, memory_mask, targets, reduction: str = "mean") -> torch.Tensor:
    """-sum_t log P(y*_t | y*_<t, context) per sample, PAD masked; mean or sum over the batch."""
    if targets.numel() == 0 or ((targets != model.pad_id).sum(-1) == 0).any():
        raise DataError("empty target sequence")
    tok_lp, _, _ = model.teacher_forced(memory, memory_mask, targets)
    per_sample = -tok_lp.sum(-1)
    return per_sample.mean() if reduction == "mean" else per_sample.sum()


def contrastive_loss(anchor, negatives, tau: float, infonce: bool = False) -> torch.Tensor:
    """Anchor-vs-negatives loss with the anchor as its own positive.

    loss = -log[ exp(sim(g, g)/tau) / sum_j exp(sim(g, g_j^-)/tau) ]

    The positive is left out of the denominator, so the value can be
    negative; ``infonce=True`` adds it back. Accepts a single anchor (d,)
    with negatives (M, d), or a batch (B, d) with (B, M, d), averaged over B.
    """
    if anchor.dim() == 1:
        anchor, negatives = anchor[None], negatives[None]
    if negatives.dim() != 3 or negatives.shape[1] < 1:
        raise ShapeError("need at least one negative (N >= 2 candidates)")
    if (anchor.norm(dim=-1) == 0).any() or (negatives.norm(dim=-1) == 0).any():
        raise NumericError("zero embedding in contrastive loss")
    g = F.normalize(anchor, dim=-1)
    neg = F.normalize(negatives, dim=-1)
    pos_logit = (g * g).sum(-1) / tau
    neg_logits = torch.einsum("bd,bmd->bm", g, neg) / tau
    if infonce:
        neg_logits = torch.cat([pos_logit[:, None], neg_logits], dim=1)
    return (torch.logsumexp(neg_logits, dim=1) - pos_logit).mean()


class ReferencePolicy:
    """Frozen EMA shadow of the live generator, used as the KL reference."""

    def __init__(self, live: nn.Module, momentum: float = 0.99):
        self.model = copy.deepcopy(live)
        self.momentum = momentum
        for p in self.model.parameters():
            p.requires_grad_(False)

    def update(self, live: nn.Module) -> None:
        ema_update(self.model, live, self.momentum)


def ema_update(reference, live, m: float):
    """reference <- m * reference + (1 - m) * live, in place, elementwise.

    Works on modules or on matching sequences of tensors; returns ``reference``.
    """
    ref_params = list(reference.parameters()) if isinstance(reference, nn.Module) else list(reference)
    live_params = list(live.parameters()) if isinstance(live, nn.Module) else list(live)
    if len(ref_params) != len(live_params) or any(r.shape != l.shape for r, l in zip(ref_params, live_params)):
        raise ShapeError("reference and live parameters are not shape-congruent")
    with torch.no_grad():
        for r, l in zip(ref_params, live_params):
            r.mul_(m).add_(l.detach(), alpha=1.0 - m)
    return reference


def kl_term(live_logprob: torch.Tensor, reference_logprob: torch.Tensor) -> torch.Tensor:
    """log pi_live(y|x) - log pi_ref(y|x); the reference side carries no gradient."""
    return live_logprob - reference_logprob.detach()


def ppo_objective(reward, kl, beta: float):
    """Per-sample reward-minus-KL objective (to be maximised)."""
    return reward - beta * kl


def ppo_loss(reward, live_logprob, reference_logprob, beta: float) -> torch.Tensor:
    """Policy-gradient surrogate whose gradient ascends reward - beta * KL.

    loss = -(r - beta * kl.detach()) * log pi_live(y|x) + beta * kl, averaged.
    """
    reward = torch.as_tensor(reward, dtype=live_logprob.dtype, device=live_logprob.device)
    kl = kl_term(live_logprob, reference_logprob)
    advantage = ppo_objective(reward, kl.detach(), beta)
    return (-advantage * live_logprob + beta * kl).mean()


def combine_losses(ce, ppo, cl, lambda_ppo: float, lambda_cl: float):
    return ce + lambda_ppo * ppo + lambda_cl * cl
