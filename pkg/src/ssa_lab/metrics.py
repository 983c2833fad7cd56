"""Attention diagnostics: entropy, top-k mass ("sparsity"), sink mass, logit KL.

Row-level functions take a single normalized attention row. The ``*_rows``
variants work on captured weight tensors [..., h, T, T] (causal rows, zeros
above the diagonal) and return one value per query row.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .attention import AttnConfig, Mode

SINK_FRACTION = 0.3


def attn_entropy(row) -> float:
    a = np.asarray(row, dtype=np.float64)
    if (a < 0).any():
        raise ValueError("attention weights must be nonnegative")
    if abs(a.sum() - 1.0) > 1e-4:
        raise ValueError(f"attention row sums to {a.sum()}, expected 1")
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def attn_sparsity(row, block_map, topk_set) -> float:
    """Attention mass falling in the selected blocks; ``block_map[j]`` is key j's block."""
    a = np.asarray(row, dtype=np.float64)
    blocks = np.asarray(block_map)
    if blocks.shape != a.shape:
        raise ValueError(f"block_map length {blocks.size} != row length {a.size}")
    return float(a[np.isin(blocks, list(topk_set))].sum())


def sink_mass(row, fraction: float = SINK_FRACTION) -> float:
    """Mass on the first ``ceil(fraction * len(row))`` keys."""
    a = np.asarray(row, dtype=np.float64)
    return float(a[: math.ceil(fraction * len(a))].sum())


def kl_divergence(p_logits, q_logits) -> torch.Tensor:
    """Per-row KL(softmax(p) || softmax(q)), natural log."""
    p_logits = torch.as_tensor(p_logits, dtype=torch.float64)
    q_logits = torch.as_tensor(q_logits, dtype=torch.float64)
    lp = torch.log_softmax(p_logits, dim=-1)
    lq = torch.log_softmax(q_logits, dim=-1)
    return (lp.exp() * (lp - lq)).sum(-1).clamp_min(0.0)


def logit_kl(model, tokens, cfg: AttnConfig | None = None) -> float:
    """Mean over positions of KL(full-mode next-token dist || sparse-mode dist)."""
    full = model.forward_inference(tokens, Mode.FULL, cfg)
    sparse = model.forward_inference(tokens, Mode.SPARSE, cfg)
    return float(kl_divergence(full, sparse).mean())


def entropy_rows(w: torch.Tensor) -> torch.Tensor:
    w = w.double()
    return -torch.where(w > 0, w * torch.log(w.clamp_min(1e-300)), torch.zeros_like(w)).sum(-1)


def sparsity_rows(w: torch.Tensor, block_mask: torch.Tensor, block_size: int) -> torch.Tensor:
    T = w.shape[-1]
    key_block = torch.arange(T) // block_size
    selected = block_mask[..., key_block]
    return (w.double() * selected).sum(-1)


def sink_rows(w: torch.Tensor, fraction: float = SINK_FRACTION) -> torch.Tensor:
    T = w.shape[-1]
    lengths = torch.arange(1, T + 1)
    cut = torch.ceil(fraction * lengths.double()).long()
    keep = torch.arange(T)[None, :] < cut[:, None]       # [T_query, T_key]
    return (w.double() * keep).sum(-1)


@dataclass
class MetricsRecord:
    """Per-layer/per-head means plus global means for one (mode, config) evaluation."""

    mode: str
    block_size: int
    top_k: int
    entropy: list[list[float]]        # [layer][head]
    sparsity: list[list[float]]
    sink: list[list[float]]
    logit_kl: float
    samples: int
    positions: int
    aggregation: str = "mean over positions, then heads, then layers, then samples"

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy))

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(self.sparsity))

    @property
    def mean_sink(self) -> float:
        return float(np.mean(self.sink))

    def layer_means(self, which: str) -> list[float]:
        return np.mean(getattr(self, which), axis=1).tolist()

    def summary(self) -> dict:
        d = asdict(self)
        d.update(mean_entropy=self.mean_entropy, mean_sparsity=self.mean_sparsity, mean_sink=self.mean_sink)
        return d


@torch.no_grad()
def collect_metrics(model, samples: Sequence, cfg: AttnConfig, mode: Mode | str = Mode.FULL,
                    sink_fraction: float = SINK_FRACTION) -> MetricsRecord:
    """Entropy/sparsity/sink of the dense attention maps, with the forward run in ``mode``.

    The dense weights are always those of full softmax attention from each
    layer's q/K; ``mode`` decides which attention feeds the residual stream.
    """
    samples = [torch.as_tensor(s) for s in samples]
    if not samples:
        raise ValueError("metrics need at least one evaluation sample")
    mode = Mode(mode)
    L, H = model.cfg.n_layers, model.cfg.n_heads
    ent = np.zeros((len(samples), L, H))
    spa = np.zeros_like(ent)
    snk = np.zeros_like(ent)
    kls = []
    positions = 0
    for i, tok in enumerate(samples):
        out = model(tok, mode=mode, capture_attn=True, attn_cfg=cfg)
        for l, cap in enumerate(out.attention):
            w = cap.weights
            # mean over query positions (and batch rows), one value per head
            def per_head(v):
                v = v.reshape(-1, H, v.shape[-1]).mean(dim=(0, 2))
                return v.numpy()
            ent[i, l] = per_head(entropy_rows(w))
            spa[i, l] = per_head(sparsity_rows(w, cap.block_mask, cfg.block_size))
            snk[i, l] = per_head(sink_rows(w, sink_fraction))
        kls.append(logit_kl(model, tok, cfg))
        positions += tok.numel()
    return MetricsRecord(
        mode=mode.value, block_size=cfg.block_size, top_k=cfg.top_k,
        entropy=ent.mean(0).tolist(), sparsity=spa.mean(0).tolist(), sink=snk.mean(0).tolist(),
        logit_kl=float(np.mean(kls)), samples=len(samples), positions=positions,
    )


def sweep_metrics(model, corpus: Sequence, grid: Iterable[AttnConfig],
                  modes: Sequence[Mode | str] = (Mode.FULL, Mode.SPARSE)) -> list[MetricsRecord]:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty evaluation corpus")
    return [collect_metrics(model, corpus, cfg, m) for cfg in grid for m in modes]


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "block_size", "top_k", "layer", "head", "attn_entropy",
                    "attn_sparsity", "sink_mass", "logit_kl"])
        for r in records:
            for l, (er, sr, kr) in enumerate(zip(r.entropy, r.sparsity, r.sink)):
                for h, (e, s, k) in enumerate(zip(er, sr, kr)):
                    w.writerow([r.mode, r.block_size, r.top_k, l, h, f"{e:.10g}", f"{s:.10g}",
                                f"{k:.10g}", f"{r.logit_kl:.10g}"])


def write_metrics_json(records: Sequence[MetricsRecord], path, extra: dict | None = None) -> None:
    doc = {"records": [r.summary() for r in records]}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
