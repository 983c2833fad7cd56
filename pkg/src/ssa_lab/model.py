"""Tiny decoder-only transformer with the dual-stream (full/sparse) forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import torch
from torch import nn

from .attention import AttnConfig, Mode, block_selection_mask, full_attention, gated_output, sparse_attention
from .losses import alignment_losses
from .numerics import cross_entropy, rmsnorm, rope_apply


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    vocab_size: int = 259
    rope_theta: float = 500_000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = True
    ffn_mult: int = 4
    init_std: float = 0.02
    attn: AttnConfig = field(default_factory=AttnConfig)

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValueError("rope_theta and norm_eps must be positive")


@dataclass
class LayerCapture:
    """Dense attention weights [..., h, T, T] and the block choice [..., h, T, B] of one layer."""

    weights: torch.Tensor
    block_mask: torch.Tensor


@dataclass
class StreamOutput:
    logits: torch.Tensor
    alignment_loss: torch.Tensor
    mode_used: Mode
    ce_loss: Optional[torch.Tensor] = None
    layer_alignment: list[torch.Tensor] = field(default_factory=list)
    layer_pairs: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    attention: Optional[list[LayerCapture]] = None


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, hd = cfg.d_model, cfg.head_dim
        self.cfg = cfg
        self.norm1 = RMSNorm(d, cfg.norm_eps)
        self.wq = nn.Linear(d, cfg.n_heads * hd, bias=False)
        self.wk = nn.Linear(d, cfg.n_kv_heads * hd, bias=False)
        self.wv = nn.Linear(d, cfg.n_kv_heads * hd, bias=False)
        self.gate = nn.Linear(d, cfg.n_heads * hd, bias=True)
        self.wo = nn.Linear(cfg.n_heads * hd, d, bias=False)
        self.norm2 = RMSNorm(d, cfg.norm_eps)
        self.w1 = nn.Linear(d, cfg.ffn_mult * d, bias=False)
        self.w2 = nn.Linear(cfg.ffn_mult * d, d, bias=False)

    def qkv(self, h, positions):
        cfg = self.cfg
        lead = h.shape[:-1]
        q = self.wq(h).view(*lead, cfg.n_heads, cfg.head_dim)
        k = self.wk(h).view(*lead, cfg.n_kv_heads, cfg.head_dim)
        v = self.wv(h).view(*lead, cfg.n_kv_heads, cfg.head_dim)
        return rope_apply(q, positions, cfg.rope_theta), rope_apply(k, positions, cfg.rope_theta), v

    def forward(self, x, positions, mode: Mode, attn_cfg: AttnConfig, compute_aux: bool,
                capture: bool, align_terms: str = "both"):
        h = self.norm1(x)
        q, k, v = self.qkv(h, positions)
        block_mask = None
        if mode is Mode.SPARSE or compute_aux or capture:
            block_mask = block_selection_mask(q, k, attn_cfg)

        def run(m):
            if m is Mode.FULL:
                return full_attention(q, k, v)
            return sparse_attention(q, k, v, attn_cfg, block_mask=block_mask)

        a_main = run(mode)
        align = None
        pair = None
        if compute_aux:
            a_aux = run(mode.opposite)
            a_full, a_sparse = (a_main, a_aux) if mode is Mode.FULL else (a_aux, a_main)
            sparsity, commitment = alignment_losses(a_full, a_sparse)
            align = {"both": sparsity + commitment, "sparsity": sparsity,
                     "commitment": commitment}[align_terms]
            pair = (a_full, a_sparse)
        captured = None
        if capture:
            with torch.no_grad():
                _, w = full_attention(q, k, v, return_weights=True)
            captured = LayerCapture(w, block_mask)
        x = x + gated_output(h, a_main, self.gate, self.wo, attn_cfg.gate_enabled)
        x = x + self.w2(nn.functional.silu(self.w1(self.norm2(x))))
        return x, align, pair, captured


class SSATransformer(nn.Module):
    """Decoder-only LM whose attention can run full or block-sparse per forward call."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm_f = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.reset_parameters()
        if cfg.tie_embeddings:
            self.head.weight = self.embed.weight

    def reset_parameters(self):
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm_f.weight":
                nn.init.ones_(p)
            elif name.endswith("gate.bias"):
                nn.init.zeros_(p)
            else:
                nn.init.normal_(p, mean=0.0, std=std)

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_tokens(self, tokens: torch.Tensor):
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.cfg.vocab_size)][0]
            raise ValueError(f"token id {int(bad)} outside vocabulary of size {self.cfg.vocab_size}")

    def forward(self, tokens: torch.Tensor, mode: Mode | str = Mode.SPARSE, compute_aux: bool = False,
                capture_attn: bool = False, targets: torch.Tensor | None = None,
                attn_cfg: AttnConfig | None = None, align_terms: str = "both") -> StreamOutput:
        """One stream of the dual-stream pass.

        ``tokens`` is [T] or [batch, T]. With ``compute_aux`` every layer also
        evaluates the opposite attention mode on the same q/k/v; that output
        only feeds the alignment loss and never the residual stream. The
        per-layer alignment terms are summed and divided by the layer count.
        """
        mode = Mode(mode)
        attn_cfg = attn_cfg or self.cfg.attn
        tokens = torch.as_tensor(tokens)
        self._check_tokens(tokens)
        T = tokens.shape[-1]
        positions = torch.arange(T)
        x = self.embed(tokens)
        total_align = x.new_zeros(())
        layer_align, pairs, captures = [], [], []
        for block in self.blocks:
            x, align, pair, cap = block(x, positions, mode, attn_cfg, compute_aux, capture_attn, align_terms)
            if align is not None:
                total_align = total_align + align
                layer_align.append(align)
                pairs.append(pair)
            if cap is not None:
                captures.append(cap)
        logits = self.head(self.norm_f(x))
        out = StreamOutput(
            logits=logits,
            alignment_loss=total_align / len(self.blocks),
            mode_used=mode,
            layer_alignment=layer_align,
            layer_pairs=pairs,
            attention=captures if capture_attn else None,
        )
        if targets is not None:
            out.ce_loss = cross_entropy(logits, torch.as_tensor(targets))
        return out

    @torch.no_grad()
    def forward_inference(self, tokens, mode: Mode | str | None = None,
                          cfg_override: AttnConfig | None = None) -> torch.Tensor:
        """Logits only; sparse with the trained config unless told otherwise."""
        cfg = cfg_override or self.cfg.attn
        mode = Mode(mode) if mode is not None else (cfg.mode if cfg_override else Mode.SPARSE)
        return self.forward(tokens, mode=mode, attn_cfg=cfg).logits


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> SSATransformer:
    torch.manual_seed(seed)
    return SSATransformer(cfg).to(dtype)


def with_attn(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, attn=replace(cfg.attn, **changes))
