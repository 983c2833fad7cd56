"""Dual-stream SSA training: mode routing, AdamW with warmup+cosine, the step loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .attention import Mode
from .data import BatchSampler
from .losses import NonFiniteLoss, alignment_losses, total_loss
from .model import SSATransformer, StreamOutput
from .numerics import smooth_l1

__all__ = [
    "TrainConfig", "TrainingDiverged", "alignment_losses", "total_loss", "route_mode", "mode_rng",
    "lr_multiplier", "make_optimizer", "optimizer_step", "train", "TrainState", "ssa_loss",
]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 10.0
    p_full: float = 0.5
    lr: float = 1e-3
    total_steps: int = 600
    warmup_steps: int = 30
    batch_size: int = 16
    context_len: int = 128
    seed: int = 0
    eval_interval: int = 0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    align_terms: str = "both"
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if not 0.0 <= self.p_full <= 1.0:
            raise ValueError(f"p_full={self.p_full} outside [0, 1]")
        if self.alpha < 0:
            raise ValueError(f"alpha={self.alpha} must be >= 0")
        if self.align_terms not in ("both", "sparsity", "commitment"):
            raise ValueError(f"align_terms must be both|sparsity|commitment, got {self.align_terms!r}")


def ssa_loss(model: SSATransformer, x, y, mode: Mode, alpha: float, align_terms: str = "both",
             frozen_pairs=None, step: int | None = None) -> tuple[torch.Tensor, StreamOutput]:
    """Cross-entropy of the routed stream plus ``alpha`` times the layer-averaged alignment.

    ``frozen_pairs`` (one ``(a_full, a_sparse)`` per layer, from an earlier
    forward) swaps the stop-gradient targets for those fixed tensors. At the
    parameters that produced them the value and the autograd gradient equal
    the real objective's, and the surrogate is an ordinary function of the
    parameters, so it can be finite-differenced.
    """
    out = model(x, mode=mode, compute_aux=alpha > 0, targets=y, align_terms=align_terms)
    align = out.alignment_loss
    if frozen_pairs is not None:
        terms = []
        for (af, asp), (af0, as0) in zip(out.layer_pairs, frozen_pairs):
            sparsity, commitment = smooth_l1(af, as0), smooth_l1(asp, af0)
            terms.append({"both": sparsity + commitment, "sparsity": sparsity,
                          "commitment": commitment}[align_terms])
        align = sum(terms) / len(model.blocks)
    return total_loss(out.ce_loss, align, alpha, step), out


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


def mode_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for the mode draw of one step, independent of data order."""
    return np.random.default_rng([seed, step, 0x55A])


def route_mode(rng: np.random.Generator, p_full: float, is_training: bool = True) -> Mode:
    if not is_training:
        return Mode.SPARSE
    return Mode.FULL if rng.random() < p_full else Mode.SPARSE


def lr_multiplier(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup reaching 1 at ``warmup_steps``, cosine to 0 at ``total_steps``."""
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=1e-8)


def optimizer_step(model: torch.nn.Module, opt: torch.optim.Optimizer, step: int, cfg: TrainConfig) -> float:
    """Clip, schedule and apply one AdamW update. Returns the learning rate used."""
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise TrainingDiverged(step, f"non-finite gradient in {name}")
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    lr = cfg.lr * lr_multiplier(step, cfg.warmup_steps, cfg.total_steps)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.step()
    opt.zero_grad(set_to_none=True)
    return lr


@dataclass
class TrainState:
    model: SSATransformer
    optimizer: torch.optim.AdamW
    step: int = 0
    initial_ce: Optional[float] = None
    bad_streak: int = 0


def train(model: SSATransformer, sampler: BatchSampler, cfg: TrainConfig,
          state: TrainState | None = None, log: Optional[Callable[[dict], None]] = None,
          on_eval: Optional[Callable[[TrainState], None]] = None,
          stop_at: int | None = None) -> tuple[TrainState, list[dict]]:
    """Run the dual-stream loop from ``state.step`` up to ``stop_at`` (default: total_steps).

    Each step draws FULL/SPARSE from ``mode_rng(seed, step)``, runs the stream with
    the counterpart branch only when ``alpha > 0``, and applies one optimizer step.
    """
    if state is None:
        state = TrainState(model, make_optimizer(model, cfg))
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    records = []
    model.train()
    while state.step < end:
        step = state.step
        t0 = time.perf_counter()
        mode = route_mode(mode_rng(cfg.seed, step), cfg.p_full)
        x, y = sampler.batch(step)
        try:
            loss, out = ssa_loss(model, torch.from_numpy(x), torch.from_numpy(y), mode, cfg.alpha,
                                 cfg.align_terms, step=step)
        except NonFiniteLoss as e:
            raise TrainingDiverged(step, str(e)) from e
        loss.backward()
        lr = optimizer_step(model, state.optimizer, step, cfg)
        ce = out.ce_loss.item()
        if state.initial_ce is None:
            state.initial_ce = ce
        state.bad_streak = state.bad_streak + 1 if ce > cfg.divergence_factor * state.initial_ce else 0
        rec = {"step": step, "mode": mode.value, "ce": ce, "align": out.alignment_loss.item(),
               "lr": lr, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        records.append(rec)
        if log is not None:
            log(rec)
        state.step += 1
        if state.bad_streak >= cfg.divergence_patience:
            raise TrainingDiverged(step, f"ce above {cfg.divergence_factor}x initial for "
                                         f"{cfg.divergence_patience} steps")
        if on_eval is not None and cfg.eval_interval and state.step % cfg.eval_interval == 0:
            on_eval(state)
    model.eval()
    return state, records


def jsonl_logger(path) -> Callable[[dict], None]:
    def write(rec):
        with open(path, "a") as f:
            f.write(json.dumps(rec) + "\n")
    return write


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
