"""Bidirectional alignment losses and the combined SSA objective."""

from __future__ import annotations

import math

import torch

from .numerics import smooth_l1, stop_gradient


def alignment_losses(a_full: torch.Tensor, a_sparse: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(sparsity_loss, commitment_loss)``.

    Both are SmoothL1 of the same difference, so they are equal in value. The
    sparsity loss only moves the full-attention output (sparse side frozen);
    the commitment loss only moves the sparse-attention output.
    """
    if a_full.shape != a_sparse.shape:
        raise ValueError(f"alignment shape mismatch: {tuple(a_full.shape)} vs {tuple(a_sparse.shape)}")
    sparsity = smooth_l1(a_full, stop_gradient(a_sparse))
    commitment = smooth_l1(a_sparse, stop_gradient(a_full))
    return sparsity, commitment


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, what, value):
        super().__init__(f"non-finite {what} ({value}) at step {step}")
        self.step = step


def total_loss(ce, alignment, alpha: float, step: int | None = None):
    """``ce + alpha * alignment``; raises ``NonFiniteLoss`` on a non-finite input."""
    for what, v in (("cross-entropy", ce), ("alignment loss", alignment)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLoss(step, what, val)
    return ce + alpha * alignment
