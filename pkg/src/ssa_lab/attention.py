"""Full and block-sparse causal attention with grouped KV heads.

Tensors follow the layout ``[..., T, heads, head_dim]``; any leading batch
dimensions are carried through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from torch import nn

from .numerics import matmul, softmax_lastdim


class Mode(str, Enum):
    FULL = "full"
    SPARSE = "sparse"

    @property
    def opposite(self) -> "Mode":
        return Mode.SPARSE if self is Mode.FULL else Mode.FULL


@dataclass(frozen=True)
class AttnConfig:
    block_size: int = 16
    top_k: int = 16
    mode: Mode = Mode.SPARSE
    gate_enabled: bool = True

    def __post_init__(self):
        if self.block_size < 1 or self.top_k < 1:
            raise ValueError(f"block_size and top_k must be >= 1, got {self.block_size}, {self.top_k}")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def receptive_field(self) -> int:
        return self.block_size * self.top_k

    def n_blocks(self, seq_len: int) -> int:
        return -(-seq_len // self.block_size)


@dataclass(frozen=True)
class BlockSelection:
    """Blocks visible to the query at ``position``, in selection order."""

    position: int
    blocks: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError(f"duplicate blocks in selection {self.blocks}")


def _split_heads(n_heads: int, n_kv: int):
    if n_kv < 1 or n_heads % n_kv:
        raise ValueError(f"{n_heads} query heads not divisible by {n_kv} KV heads")
    return n_heads // n_kv


def _expand_kv(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    group = _split_heads(n_heads, x.shape[-2])
    return x if group == 1 else x.repeat_interleave(group, dim=-2)


def causal_mask(T: int, device=None) -> torch.Tensor:
    return torch.ones(T, T, dtype=torch.bool, device=device).tril()


def _attend(q, K, V, allowed, return_weights):
    """Masked softmax attention; ``allowed`` broadcasts against [..., h, T, T]."""
    h = q.shape[-2]
    K = _expand_kv(K, h)
    V = _expand_kv(V, h)
    qh = q.transpose(-3, -2)
    kh = K.transpose(-3, -2)
    vh = V.transpose(-3, -2)
    logits = matmul(qh, kh.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    logits = logits.masked_fill(~allowed, float("-inf"))
    w = softmax_lastdim(logits)
    out = matmul(w, vh).transpose(-3, -2)
    return (out, w) if return_weights else out


def full_attention(q: torch.Tensor, K: torch.Tensor, V: torch.Tensor,
                   return_weights: bool = False):
    """Causal softmax attention. Weights, if requested, are [..., h, T, T]."""
    _split_heads(q.shape[-2], K.shape[-2])
    return _attend(q, K, V, causal_mask(q.shape[-3], q.device), return_weights)


def block_pool(K: torch.Tensor, block_size: int) -> torch.Tensor:
    """Mean of the keys in each block; a partial last block averages its actual rows."""
    T = K.shape[-3]
    B = -(-T // block_size)
    pad = B * block_size - T
    if pad:
        zeros = K.new_zeros(K.shape[:-3] + (pad,) + K.shape[-2:])
        K = torch.cat([K, zeros], dim=-3)
    sums = K.reshape(K.shape[:-3] + (B, block_size) + K.shape[-2:]).sum(dim=-3)
    counts = torch.full((B,), float(block_size), dtype=K.dtype, device=K.device)
    counts[-1] = block_size - pad
    return sums / counts[:, None, None]


def block_scores(q_t: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
    """Raw dot products of one query [d] against pooled block keys [B, d]."""
    return matmul(pooled, q_t)


def select_topk(scores: Sequence[float] | torch.Tensor, t: int, cfg: AttnConfig) -> BlockSelection:
    """Top-k visible blocks for query position ``t``.

    The query's own block is always taken first; the remaining slots go to the
    highest-scoring visible blocks, ties resolved toward the lower index.
    """
    own = t // cfg.block_size
    scores = [float(s) for s in scores]
    others = sorted(range(own), key=lambda b: (-scores[b], b))
    return BlockSelection(t, (own, *others[: cfg.top_k - 1]))


def block_selection_mask(q: torch.Tensor, K: torch.Tensor, cfg: AttnConfig) -> torch.Tensor:
    """Boolean [..., h, T, B] marking the blocks each query head selects.

    Vectorised equivalent of ``select_topk`` applied at every position and head.
    Selection is discrete, so it is computed without gradient.
    """
    with torch.no_grad():
        T, h = q.shape[-3], q.shape[-2]
        s = cfg.block_size
        B = -(-T // s)
        pooled = _expand_kv(block_pool(K, s), h)            # [..., B, h, d]
        scores = matmul(q.transpose(-3, -2), pooled.transpose(-3, -2).transpose(-1, -2))
        pos_block = torch.arange(T, device=q.device) // s
        blk = torch.arange(B, device=q.device)
        visible = blk[None, :] <= pos_block[:, None]         # [T, B]
        own = blk[None, :] == pos_block[:, None]
        key = scores.masked_fill(~visible, float("-inf")).masked_fill(own, float("inf"))
        order = torch.sort(key, dim=-1, descending=True, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(-1, order, torch.arange(B, device=q.device).expand_as(order))
        return (rank < cfg.top_k) & visible


def token_mask_from_blocks(block_mask: torch.Tensor, block_size: int) -> torch.Tensor:
    """Expand [..., T, B] block choices into a causal [..., T, T] key mask."""
    T = block_mask.shape[-2]
    key_block = torch.arange(T, device=block_mask.device) // block_size
    allowed = block_mask[..., key_block]
    return allowed & causal_mask(T, block_mask.device)


def sparse_attention(q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, cfg: AttnConfig,
                     return_weights: bool = False, block_mask: torch.Tensor | None = None):
    """Block-sparse causal attention over each query head's selected blocks."""
    _split_heads(q.shape[-2], K.shape[-2])
    if block_mask is None:
        block_mask = block_selection_mask(q, K, cfg)
    allowed = token_mask_from_blocks(block_mask, cfg.block_size)
    return _attend(q, K, V, allowed, return_weights)


def attention(q, K, V, cfg: AttnConfig, mode: Mode | str | None = None, return_weights=False):
    mode = Mode(mode or cfg.mode)
    if mode is Mode.FULL:
        return full_attention(q, K, V, return_weights)
    return sparse_attention(q, K, V, cfg, return_weights)


def gated_output(h: torch.Tensor, attn: torch.Tensor, gate: nn.Linear, out_proj: nn.Linear,
                 gate_enabled: bool = True) -> torch.Tensor:
    """``out_proj(sigmoid(gate(h)) * attn)`` with heads flattened; gate is 1 when disabled."""
    flat = attn.reshape(attn.shape[:-2] + (-1,))
    if gate_enabled:
        flat = torch.sigmoid(gate(h)) * flat
    return out_proj(flat)
