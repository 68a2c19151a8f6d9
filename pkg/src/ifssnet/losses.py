"""Dice, learnable-weight Tversky index and the windowed training objective.

Channel convention for two-channel arrays: index 0 is foreground, index 1 is
background, on the last axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

EPS = 1e-7
_SUM_TOL = 1e-6


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def dice_coeff(y_hat, y) -> torch.Tensor:
    """``2 sum(y_hat * y) / (sum(y_hat**2) + sum(y**2))``; 1 when both are empty."""
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    num = 2 * (y_hat * y).sum()
    den = (y_hat * y_hat).sum() + (y * y).sum()
    if den == 0:
        return torch.ones((), dtype=num.dtype)
    return num / den


class TverskyWeights(nn.Module):
    """Unconstrained logits ``(a, b)``; ``softmax`` gives the FP/FN weights."""

    def __init__(self, a: float = 0.0, b: float = 0.0):
        super().__init__()
        self.logits = nn.Parameter(torch.tensor([a, b], dtype=torch.float32))

    def forward(self) -> tuple[torch.Tensor, torch.Tensor]:
        return alpha_beta(self.logits)


def alpha_beta(params) -> tuple[torch.Tensor, torch.Tensor]:
    """``(alpha, beta) = softmax(a, b)``.

    ``beta`` is formed as ``1 - alpha`` so the pair sums to one exactly in
    floating point, not just up to rounding.
    """
    if isinstance(params, TverskyWeights):
        params = params.logits
    logits = _as_tensor(params)
    if logits.shape != (2,):
        raise ValueError(f"expected two logits, got shape {tuple(logits.shape)}")
    alpha = torch.sigmoid(logits[0] - logits[1])
    return alpha, 1 - alpha


def _check_weights(alpha, beta) -> None:
    total = float(torch.as_tensor(alpha).detach()) + float(torch.as_tensor(beta).detach())
    if abs(total - 1.0) > _SUM_TOL:
        raise ValueError(f"alpha + beta must equal 1, got {total}")


def _tversky_terms(y_hat, y):
    tp = (y_hat[..., 0] * y[..., 0]).sum()
    fp = (y_hat[..., 0] * y[..., 1]).sum()
    fn = (y_hat[..., 1] * y[..., 0]).sum()
    return tp, fp, fn


def tversky_index(y_hat, y, alpha, beta) -> torch.Tensor:
    """Tversky overlap of two-channel probabilities against a one-hot target.

    ``TP / (TP + alpha*FP + beta*FN)`` with soft counts; a small epsilon in
    numerator and denominator makes the empty-vs-empty case equal 1.
    """
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if y_hat.shape[-1] != 2:
        raise ValueError("expected two channels on the last axis")
    _check_weights(alpha, beta)
    tp, fp, fn = _tversky_terms(y_hat, y)
    return (tp + EPS) / (tp + alpha * fp + beta * fn + EPS)


def tversky_index_window(y_hat, y, alpha, beta) -> torch.Tensor:
    """One ratio over a whole ``(w, H, W, 2)`` window.

    Numerator and denominator are each summed over every slice and voxel
    before dividing; this is not the mean of per-slice indices.
    """
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    if y_hat.ndim != 4:
        raise ValueError(f"expected a (w, H, W, 2) window, got shape {tuple(y_hat.shape)}")
    return tversky_index(y_hat, y, alpha, beta)


def total_loss(
    per_step_TIs: Sequence,
    w: int,
    params_l2_norm_sq=0.0,
    lam: float = 1e-5,
    window_factor: str = "literal",
) -> torch.Tensor:
    """``1 - mean_t(TI_t / w) + lam * ||params||^2``.

    ``window_factor="off"`` drops the ``1/w`` scaling of each step's index.
    With it on, a perfect prediction bottoms out at ``1 - 1/w``.
    """
    if len(per_step_TIs) == 0:
        raise ValueError("need at least one per-step index")
    if window_factor == "literal":
        scale = 1.0 / w
    elif window_factor == "off":
        scale = 1.0
    else:
        raise ValueError(f"window_factor must be 'literal' or 'off', got {window_factor!r}")
    tis = torch.stack([_as_tensor(ti).reshape(()) for ti in per_step_TIs])
    return 1 - (scale * tis).mean() + lam * _as_tensor(params_l2_norm_sq)
