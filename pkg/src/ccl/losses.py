"""Loss terms for experts, student and discriminators.

Probability maps are ``(N, C, H, W)`` tensors; "mean over pixels" runs over
every pixel of every image in the batch. Teacher distributions are always
detached, so gradients only reach the imitating model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .core import IGNORE

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights of the auxiliary terms; 0 removes a term entirely."""

    lambda_adv: float = 1e-3
    lambda_cl: float = 1e-3
    lambda_okd: float = 1e-3
    lambda_wr: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_cl", "lambda_okd", "lambda_wr"):
            v = getattr(self, name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _weighted(base, weight: float, term):
    # A zero weight drops the term, so a non-finite term cannot leak in as 0 * nan.
    return base if weight == 0 else base + weight * term


def seg_loss(prob: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between ``(N, C, H, W)`` probabilities and ``(N, H, W)`` labels."""
    if prob.shape[0] != labels.shape[0] or prob.shape[2:] != labels.shape[1:]:
        raise ValueError(f"prob {tuple(prob.shape)} and labels {tuple(labels.shape)} disagree")
    labels = labels.long()
    valid = labels != IGNORE
    if not valid.any():
        raise ValueError("every pixel is IGNORE; cross-entropy is undefined")
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    picked = prob.gather(1, safe.unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp_min(EPS))
    return nll[valid].mean()


def kl_div(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel KL(p || q) over the class axis; ``p`` is the detached teacher."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    p = p.detach().clamp_min(EPS)
    q = q.clamp_min(EPS)
    return (p * (p.log() - q.log())).sum(1).mean()


def _bce(scores: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(scores, torch.full_like(scores, target))


def adv_loss_G(target_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Generator side: target-derived predictions should be scored as source (label 1)."""
    if len(target_scores) == 0:
        raise ValueError("adversarial loss needs at least one target score map")
    return torch.stack([_bce(s, 1.0) for s in target_scores]).mean()


def adv_loss_D(source_scores: torch.Tensor | Sequence[torch.Tensor],
               target_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Discriminator side: source predictions -> 1, every target-side prediction -> 0.

    The source half and the (averaged) target half are weighted equally.
    """
    if len(target_scores) == 0:
        raise ValueError("adversarial loss needs at least one target score map")
    if isinstance(source_scores, torch.Tensor):
        source_scores = [source_scores]
    src = torch.stack([_bce(s, 1.0) for s in source_scores]).mean()
    tgt = torch.stack([_bce(s, 0.0) for s in target_scores]).mean()
    return 0.5 * (src + tgt)


# Expert/student adversarial terms share the same BCE realisation.
adv_loss_expert_G = adv_loss_student_G = adv_loss_G
adv_loss_expert_D = adv_loss_student_D = adv_loss_D


def consistency_loss(m: int, native_preds: Sequence[torch.Tensor | None],
                     restyled_preds: Sequence[torch.Tensor | None]) -> torch.Tensor | float:
    """Collaborative consistency term of expert ``m`` (1-based).

    Args:
        m: index of the learning expert.
        native_preds: entry ``n-1`` is expert n's prediction on its own target
            domain's native images (teacher, detached). Entry ``m-1`` is unused.
        restyled_preds: entry ``n-1`` is expert m's prediction on domain n's
            images rendered in style m. Entry ``m-1`` is unused.

    Returns:
        Mean KL over the other ``M - 1`` domains, or 0.0 when ``M == 1``.
    """
    M = len(native_preds)
    if len(restyled_preds) != M:
        raise ValueError(f"{M} native predictions but {len(restyled_preds)} restyled ones")
    if not 1 <= m <= M:
        raise ValueError(f"expert index {m} outside 1..{M}")
    if M == 1:
        return 0.0
    terms = [kl_div(native_preds[n], restyled_preds[n]) for n in range(M) if n != m - 1]
    return torch.stack(terms).mean()


def okd_loss(expert_preds: Sequence[torch.Tensor], student_preds: Sequence[torch.Tensor]) -> torch.Tensor:
    """Student imitates expert n on target n, averaged over the M targets."""
    if len(expert_preds) != len(student_preds) or not expert_preds:
        raise ValueError(f"need aligned non-empty lists, got {len(expert_preds)} and {len(student_preds)}")
    return torch.stack([kl_div(p, q) for p, q in zip(expert_preds, student_preds)]).mean()


def weight_reg(expert_params: Sequence[torch.Tensor], student_params: torch.Tensor,
               stop_student: bool = False) -> torch.Tensor:
    """Mean over experts of the summed absolute coordinate difference to the student."""
    if not expert_params:
        raise ValueError("weight_reg needs at least one expert")
    for e in expert_params:
        if e.shape != student_params.shape:
            raise ValueError(f"parameter length mismatch: {tuple(e.shape)} vs {tuple(student_params.shape)}")
    s = student_params.detach() if stop_student else student_params
    return torch.stack([(e - s).abs().sum() for e in expert_params]).mean()


def expert_objective(seg, adv_g, cl, w: LossWeights):
    """Training loss of one expert: seg + lambda_adv * adv + lambda_cl * cl."""
    return _weighted(_weighted(seg, w.lambda_adv, adv_g), w.lambda_cl, cl)


def student_objective(seg, adv_g, okd, w: LossWeights):
    return _weighted(_weighted(seg, w.lambda_adv, adv_g), w.lambda_okd, okd)


def total_objective(expert_total, student_total, wr, w: LossWeights):
    return _weighted(student_total + expert_total, w.lambda_wr, wr)
