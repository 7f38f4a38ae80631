"""Instruction cross-entropy, BCE + soft-dice mask loss, and their weighted total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    lambda_c: float = 1.0
    lambda_m: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass
class LossBreakdown:
    l_c: torch.Tensor
    l_bce: torch.Tensor
    l_dice: torch.Tensor
    l_m: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def instruction_ce(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean ``-log softmax(logits)[target]`` over positions where ``loss_mask`` is set.

    ``logits`` is ``(..., T, V)``; ``targets`` and ``loss_mask`` are ``(..., T)``.
    """
    logits, targets = _as_tensor(logits), torch.as_tensor(targets)
    loss_mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if not loss_mask.any():
        raise ValueError("loss mask selects no positions")
    logp = logits.log_softmax(-1)
    nll = -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return nll[loss_mask].mean()


def _check_shapes(logits, gt):
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs mask {tuple(gt.shape)}")


def bce_mask(logits, gt) -> torch.Tensor:
    """Pixel-mean binary cross-entropy on logits (stable ``softplus`` form)."""
    logits = _as_tensor(logits)
    gt = torch.as_tensor(gt).to(logits.dtype)
    _check_shapes(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt, reduction="mean")


def dice_mask(logits, gt, eps: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` with ``p = sigmoid(logits)``.

    For batched input ``(B, H, W)`` the per-mask losses are averaged.
    """
    logits = _as_tensor(logits)
    gt = torch.as_tensor(gt).to(logits.dtype)
    _check_shapes(logits, gt)
    p = logits.sigmoid()
    if p.dim() <= 2:
        p, gt = p[None], gt[None]
    p, gt = p.flatten(1), gt.flatten(1)
    dice = (2 * (p * gt).sum(1) + eps) / (p.sum(1) + gt.sum(1) + eps)
    return (1 - dice).mean()


def total_loss(l_c, l_bce, l_dice, weights: LossWeights | None = None) -> LossBreakdown:
    w = weights or LossWeights()
    l_c, l_bce, l_dice = (_as_tensor(v) for v in (l_c, l_bce, l_dice))
    for name, v in (("l_c", l_c), ("l_bce", l_bce), ("l_dice", l_dice)):
        if not math.isfinite(float(v.detach())):
            raise FloatingPointError(f"{name} is not finite: {float(v)}")
    l_m = w.lambda_bce * l_bce + w.lambda_dice * l_dice
    if w.lambda_c == 0:
        # exact zero contribution, even for the logged value
        total = w.lambda_m * l_m
    else:
        total = w.lambda_c * l_c + w.lambda_m * l_m
    return LossBreakdown(l_c, l_bce, l_dice, l_m, total)
