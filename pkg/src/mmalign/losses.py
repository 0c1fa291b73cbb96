"""Training objectives: distribution-alignment KL, a Donsker–Varadhan
mutual-information bound between joint and uni-modal embeddings, and a
bidirectional momentum contrastive loss, plus the momentum parameter update.

All scalar losses are produced in float64 and are minimized; the total is
their plain sum with no extra weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import MI_MODALITIES, MODALITIES
from .errors import ValidationError


def _check_batch(*tensors: torch.Tensor) -> int:
    n = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != n:
            raise ValidationError("batch sizes differ across embedding blocks")
    if n < 2:
        raise ValidationError("losses need a batch of at least 2 aligned pairs")
    return n


def candidate_logits(anchor: torch.Tensor, cross: torch.Tensor, same: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Scaled-similarity logits of each anchor against its candidate set.

    Row i scores anchor i against the batch on the other side (the positive
    sits at column i) followed by the rest of the anchor's own side, with the
    anchor itself masked out.  Shape (B, 2B).
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    logits_cross = anchor @ cross.T / temperature
    logits_same = anchor @ same.T / temperature
    n = anchor.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    logits_same = logits_same.masked_fill(eye, -torch.inf)
    return torch.cat([logits_cross, logits_same], dim=1)


def alignment_distribution(anchor: torch.Tensor, candidates: torch.Tensor,
                           temperature: float) -> torch.Tensor:
    """Softmax over scaled similarities of one anchor to a candidate list."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if candidates.ndim != 2 or candidates.shape[0] < 1:
        raise ValidationError("candidate set must be a non-empty (k, d) matrix")
    return torch.softmax(candidates @ anchor / temperature, dim=0)


def _directional_kl(target_logits: torch.Tensor, model_logits: torch.Tensor) -> torch.Tensor:
    """Mean KL(target || model) over rows, tolerating -inf masked columns."""
    log_p = F.log_softmax(target_logits, dim=1)
    log_q = F.log_softmax(model_logits, dim=1)
    p = log_p.exp()
    contrib = torch.where(p > 0, p * (log_p - log_q), torch.zeros((), dtype=p.dtype))
    return contrib.sum(dim=1).mean()


def alignment_kl_loss(joint_src: torch.Tensor, joint_tgt: torch.Tensor,
                      modal_src: torch.Tensor, modal_tgt: torch.Tensor,
                      temperature: float) -> torch.Tensor:
    """KL divergence pulling a modality's alignment distribution toward the
    joint embedding's distribution over the same in-batch candidate set.

    The joint-side distribution is detached, so gradients only reshape the
    uni-modal embeddings.  Both anchor directions are summed; the result is
    non-negative and exactly zero when the modality equals the joint.
    """
    _check_batch(joint_src, joint_tgt, modal_src, modal_tgt)
    loss = joint_src.new_zeros(())
    for j_a, j_c, m_a, m_c in ((joint_src, joint_tgt, modal_src, modal_tgt),
                               (joint_tgt, joint_src, modal_tgt, modal_src)):
        target = candidate_logits(j_a, j_c, j_a, temperature).detach()
        model = candidate_logits(m_a, m_c, m_a, temperature)
        loss = loss + _directional_kl(target, model)
    return loss


def positive_probability(anchor: torch.Tensor, cross: torch.Tensor, same: torch.Tensor,
                         temperature: float) -> torch.Tensor:
    """Per-row softmax probability of the true counterpart at column i."""
    logits = candidate_logits(anchor, cross, same, temperature)
    n = anchor.shape[0]
    log_prob = F.log_softmax(logits, dim=1)
    return log_prob[torch.arange(n), torch.arange(n)].exp()


def contrastive_loss_from_probabilities(q_fwd: torch.Tensor, q_bwd: torch.Tensor) -> torch.Tensor:
    """Negative mean log of the per-pair mean directional probability."""
    return -torch.log(0.5 * (q_fwd + q_bwd)).mean()


def contrastive_loss(online_src: torch.Tensor, online_tgt: torch.Tensor,
                     momentum_src: torch.Tensor, momentum_tgt: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Bidirectional momentum contrastive loss for one modality.

    Anchors come from the gradient-trained encoder; the positive and all
    negatives come from the momentum encoder (detached by the caller).  The
    per-pair score is the mean of the two directional probabilities of the
    true counterpart, and the loss is the negative mean log of that score.
    """
    _check_batch(online_src, online_tgt, momentum_src, momentum_tgt)
    q_fwd = positive_probability(online_src, momentum_tgt, momentum_src, temperature)
    q_bwd = positive_probability(online_tgt, momentum_src, momentum_tgt, temperature)
    return contrastive_loss_from_probabilities(q_fwd, q_bwd)


class MutualInfoEstimator(nn.Module):
    """Statistics network for one (joint, modality) pair: a single hidden
    layer over the concatenated embeddings, scoring sample pairs."""

    def __init__(self, joint_dim: int, modal_dim: int, hidden_dim: int = 64):
        super().__init__()
        self.score = nn.Sequential(
            nn.Linear(joint_dim + modal_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, 1),
        )
        self.double()

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if p.ndim == 2:
                    bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.zero_()

    def forward(self, joint: torch.Tensor, modal: torch.Tensor) -> torch.Tensor:
        return self.score(torch.cat([joint, modal], dim=1)).squeeze(-1)


def mutual_info_estimate(net: MutualInfoEstimator, joint: torch.Tensor, modal: torch.Tensor,
                         shuffle: torch.Tensor) -> torch.Tensor:
    """Donsker–Varadhan lower bound on I(joint; modality).

    ``shuffle`` permutes the modality rows to emulate the product of
    marginals; the second term uses logsumexp so large scores cannot
    overflow.  Requires at least two samples.
    """
    n = _check_batch(joint, modal)
    if shuffle.shape[0] != n:
        raise ValidationError("shuffle permutation length must match the batch")
    t_joint = net(joint, modal).mean()
    t_marginal = net(joint, modal[shuffle])
    log_mean_exp = torch.logsumexp(t_marginal, dim=0) - math.log(n)
    return t_joint - log_mean_exp


def mutual_info_loss(nets: nn.ModuleDict, joint: torch.Tensor,
                     modal: dict[str, torch.Tensor], shuffle: torch.Tensor,
                     ema: dict[str, float] | None = None,
                     ema_decay: float = 0.99) -> tuple[torch.Tensor, dict[str, float]]:
    """Negated sum of the bound over the structure, both text channels and
    the visual channel, so minimizing the loss raises every bound.

    When ``ema`` is given, the gradient of the second bound term is
    bias-corrected with an exponential moving average of ``E[exp T]`` while
    the reported values stay the plain bound estimates.
    """
    estimates: dict[str, float] = {}
    loss = joint.new_zeros(())
    for name in MI_MODALITIES:
        net = nets[name]
        if ema is None:
            bound = mutual_info_estimate(net, joint, modal[name], shuffle)
        else:
            n = _check_batch(joint, modal[name])
            t_joint = net(joint, modal[name]).mean()
            t_marginal = net(joint, modal[name][shuffle])
            mean_exp = torch.exp(t_marginal).mean()
            prev = ema.get(name)
            current = mean_exp.item() if prev is None else (
                ema_decay * prev + (1.0 - ema_decay) * mean_exp.item())
            ema[name] = current
            # Straight-through: value is the plain bound, gradient of the
            # second term is rescaled by the moving average instead of the
            # minibatch mean.
            log_mean = torch.logsumexp(t_marginal, dim=0) - math.log(n)
            second = mean_exp / current - (mean_exp / current).detach() + log_mean.detach()
            bound = t_joint - second
        estimates[name] = float(bound.detach())
        loss = loss - bound
    return loss, estimates


def momentum_update(target: nn.Module, online: nn.Module, momentum: float) -> None:
    """In-place convex update of every target parameter toward its online
    counterpart: theta <- momentum * theta + (1 - momentum) * theta_online."""
    if not 0.0 <= momentum < 1.0:
        raise ValidationError(f"momentum must lie in [0, 1), got {momentum}")
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys():
        raise ValidationError("target and online parameter names differ")
    with torch.no_grad():
        for name, t in t_params.items():
            o = o_params[name]
            if t.shape != o.shape:
                raise ValidationError(f"shape mismatch for parameter {name}")
            t.mul_(momentum).add_(o, alpha=1.0 - momentum)


@dataclass
class LossBreakdown:
    """Scalar values of every term that entered one optimization step."""

    align: dict[str, float] = field(default_factory=dict)
    mutual_info: dict[str, float] = field(default_factory=dict)
    contrast: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "align": dict(self.align),
            "mutual_info": dict(self.mutual_info),
            "contrast": dict(self.contrast),
            "total": self.total,
        }


def combine_losses(align: dict[str, torch.Tensor],
                   mi_loss: torch.Tensor | None,
                   mi_estimates: dict[str, float],
                   contrast: dict[str, torch.Tensor]) -> tuple[torch.Tensor, LossBreakdown]:
    """Sum the alignment terms (one per modality), the mutual-information
    loss and the contrastive terms (modalities plus joint) into the total."""
    terms = list(align.values()) + list(contrast.values())
    if mi_loss is not None:
        terms.append(mi_loss)
    if not terms:
        raise ValidationError("at least one loss term must be enabled")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    breakdown = LossBreakdown(
        align={k: float(v.detach()) for k, v in align.items()},
        mutual_info=dict(mi_estimates),
        contrast={k: float(v.detach()) for k, v in contrast.items()},
        total=float(total.detach()),
    )
    return total, breakdown


def expected_loss_keys() -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """Canonical key sets: alignment runs over the six modalities, mutual
    information over its four-channel subset, contrast over modalities plus
    the joint embedding."""
    return MODALITIES, MI_MODALITIES, MODALITIES + ("joint",)
