"""Loss pieces: cross-entropy, weighted contrastive term and the negative weight rule."""

from __future__ import annotations

import torch

from .errors import ConfigError, DegenerateInputError, DomainError, InputShapeError


def kappa(r_neg: float, r_max: float) -> float:
    """Weight of a negative sample; 1 at reward 0, decreasing affinely to 1/(r_max+1)."""
    if r_max <= 0:
        raise DomainError(f"r_max must be positive, got {r_max}")
    if r_neg < 0 or r_neg > r_max:
        raise DomainError(f"negative reward {r_neg} outside [0, {r_max}]")
    return (r_max - r_neg + 1.0) / (r_max + 1.0)


def similarity(V: torch.Tensor, V_neg: torch.Tensor) -> torch.Tensor:
    """Mean over rows of the row-wise dot product. Leading batch dims are kept."""
    if V.shape != V_neg.shape:
        raise InputShapeError(f"shape mismatch {tuple(V.shape)} vs {tuple(V_neg.shape)}")
    return (V * V_neg).sum(-1).mean(-1)


def contrastive_loss(V: torch.Tensor, negatives, allow_empty: bool = False) -> torch.Tensor:
    """-sum_k kappa_k * similarity(V, V_neg_k) over ``negatives = [(V_neg, kappa), ...]``."""
    if not negatives:
        if allow_empty:
            return V.new_zeros(())
        raise ConfigError("contrastive loss needs at least one negative sample")
    total = V.new_zeros(())
    for V_neg, k in negatives:
        total = total - (torch.as_tensor(k, dtype=V.dtype) * similarity(V, V_neg)).sum()
    return total


def ce_loss(Y_hat: torch.Tensor, Y: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class over valid positions.

    ``Y_hat`` holds probability rows, ``Y`` is either one-hot rows or class indices.
    """
    mask = valid_mask.to(torch.bool)
    if not mask.any():
        raise DegenerateInputError("cross-entropy over zero valid positions")
    if Y.dtype in (torch.int64, torch.int32) and Y.dim() == Y_hat.dim() - 1:
        p_true = Y_hat.gather(-1, Y.long().unsqueeze(-1)).squeeze(-1)
    else:
        p_true = (Y_hat * Y).sum(-1)
    nll = -torch.log(p_true.clamp_min(torch.finfo(Y_hat.dtype).tiny))
    return nll[mask].mean()


def ce_from_logits(logits: torch.Tensor, targets: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    """Numerically stable equivalent of ``ce_loss(softmax(logits), targets, mask)``."""
    mask = valid_mask.to(torch.bool)
    if not mask.any():
        raise DegenerateInputError("cross-entropy over zero valid positions")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()


def total_loss(ce, cl, beta: float):
    return ce + beta * cl
