"""Masked report-generation loss, symmetric contrastive loss, and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor


class DegenerateBatchError(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_rrg: Tensor | None
    l_sr: Tensor | None
    total: Tensor

    def values(self):
        def f(t):
            return 0.0 if t is None else t.item()

        return {"l_rrg": f(self.l_rrg), "l_sr": f(self.l_sr), "total": f(self.total)}


def rrg_loss(logprobs: Tensor, targets, mask) -> Tensor:
    """Negative mean log-probability of the real target tokens.

    ``logprobs`` is ``B x N x V``; ``targets`` and ``mask`` are ``B x N``.
    Padded positions are multiplied out before summing, and the sum is
    divided by the number of real tokens.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    if logprobs.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(f"rrg_loss: logprobs {logprobs.shape}, targets {targets.shape}, mask {mask.shape}")
    total = mask.sum()
    if total == 0:
        raise DegenerateBatchError("rrg_loss: batch contains no real tokens")
    picked = tt.take_last(logprobs, np.where(mask > 0, targets, 0))
    return -(tt.sum_(picked * mask) * (1.0 / total))


def sr_loss(S: Tensor) -> Tensor:
    """Symmetric cross-entropy over rows and columns with the diagonal as target."""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"sr_loss needs a square score matrix, got {S.shape}")
    B = S.shape[0]
    diag = (np.arange(B), np.arange(B))
    img_to_txt = tt.log_softmax_lastdim(S)[diag].mean()
    txt_to_img = tt.log_softmax_lastdim(S.T)[diag].mean()
    return (img_to_txt + txt_to_img) * -0.5


def total_loss(l_rrg: Tensor | None, l_sr: Tensor | None, sr_weight: float = 1.0) -> Tensor:
    if l_rrg is None and l_sr is None:
        raise ValueError("total_loss: both components disabled")
    if l_sr is None:
        return l_rrg
    if l_rrg is None:
        return l_sr * sr_weight if sr_weight != 1.0 else l_sr
    return l_rrg + (l_sr * sr_weight if sr_weight != 1.0 else l_sr)
