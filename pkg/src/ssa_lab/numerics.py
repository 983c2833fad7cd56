"""Differentiable tensor primitives and a finite-difference gradient checker.

Everything here is a thin, shape-checked layer over torch autograd. The
primitives are written out explicitly (rather than calling the fused torch
versions) so their numerical behaviour is visible and testable against
64-bit oracles.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

IGNORE_INDEX = -100
SMOOTH_L1_BETA = 1.0


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(
            f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last axis.

    Rows may contain ``-inf`` entries (masked positions) as long as at least
    one entry per row is finite.
    """
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty last dimension")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b).abs()
    quad = 0.5 * d * d / beta
    lin = d - 0.5 * beta
    return torch.where(d < beta, quad, lin).mean()


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def rmsnorm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    if scale.shape[-1] != x.shape[-1]:
        raise ValueError(f"rmsnorm scale length {scale.shape[-1]} != last extent {x.shape[-1]}")
    inv_rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x * inv_rms * scale


def rope_angles(positions: torch.Tensor | Sequence[int], head_dim: int, theta: float,
                dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape [T, head_dim // 2]."""
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {head_dim}")
    pos = torch.as_tensor(positions, dtype=torch.float64)
    inv_freq = theta ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rope_apply(x: torch.Tensor, positions: torch.Tensor | Sequence[int], theta: float) -> torch.Tensor:
    """Rotate ``x`` of shape [..., T, heads, head_dim].

    Uses the half-split pairing: component ``i`` rotates with ``i + head_dim/2``.
    """
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d}")
    cos, sin = rope_angles(positions, d, theta, dtype=x.dtype)
    if cos.shape[0] != x.shape[-3]:
        raise ValueError(f"{cos.shape[0]} positions for a sequence of length {x.shape[-3]}")
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    x1, x2 = x[..., : d // 2], x[..., d // 2:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                  ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean next-token NLL over positions whose target is not ``ignore_index``."""
    vocab = logits.shape[-1]
    logits = logits.reshape(-1, vocab)
    targets = targets.reshape(-1)
    keep = targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= vocab))
    if bool(bad.any()):
        raise ValueError(
            f"target id {int(targets[bad][0])} outside vocabulary of size {vocab}"
        )
    if not bool(keep.any()):
        raise ValueError("cross_entropy: every position is padding")
    logp = torch.log_softmax(logits[keep], dim=-1)
    return -logp.gather(1, targets[keep][:, None]).mean()


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((f"param{i}", p))
    return out


def grad_check_report(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    floor: float = 1e-6,
    fd_fn: Callable[[], torch.Tensor] | None = None,
) -> dict[str, float]:
    """Worst relative error per parameter between autograd and central differences.

    ``params`` is a dict, an iterable of ``(name, tensor)`` pairs, or bare
    tensors. Up to ``n_coords`` coordinates are sampled per parameter (all of
    them when the tensor is smaller). The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.

    Losses containing ``stop_gradient`` are not gradients of their own value;
    pass ``fd_fn``, a surrogate with the frozen inputs held at their current
    values, and the differences are taken on it instead.
    """
    named = _named(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError(f"grad_check: non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    fd = fd_fn or loss_fn
    rng = np.random.default_rng(seed)
    report = {}
    for (name, p), g in zip(named, grads):
        analytic = torch.zeros_like(p) if g is None else g.detach().contiguous()
        numel = p.numel()
        if numel <= n_coords:
            idx = np.arange(numel)
        else:
            idx = rng.choice(numel, size=n_coords, replace=False)
        flat = p.data.view(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + epsilon
                fp = fd().item()
                flat[i] = orig - epsilon
                fm = fd().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2 * epsilon)
            a = analytic.view(-1)[i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable,
               epsilon: float = 1e-5, n_coords: int = 200, seed: int = 0,
               floor: float = 1e-6, fd_fn: Callable[[], torch.Tensor] | None = None) -> float:
    """Maximum relative gradient error over all sampled coordinates."""
    report = grad_check_report(loss_fn, params, epsilon, n_coords, seed, floor, fd_fn)
    return max(report.values(), default=0.0)
