"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .attention import AttnConfig, Mode
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
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
    init_std: float = 0.08
    # attention
    block_size: int = 8
    top_k: int = 4
    attn_mode: str = "sparse"
    gate_enabled: bool = True
    # training
    alpha: float = 10.0
    p_full: float = 0.5
    lr: float = 3e-3
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
    # data
    data_kind: str = "key-value-recall"
    data_path: str = ""
    data_tokens: int = 400_000
    data_seed: int = 0
    # output
    out_dir: str = "runs/default"
    # evaluation
    eval_tasks: str = "ppl,metrics"
    eval_mode: str = ""
    eval_tokens: int = 4097
    eval_seed: int = 999
    eval_context_len: int = 0
    eval_stride: int = 64
    eval_k_values: str = "1,2,4,8"
    eval_lengths: str = "128,256,512"
    eval_samples: int = 4
    niah_lengths: str = "128"
    niah_depths: str = "0,0.25,0.5,0.75,1"
    niah_per_cell: int = 4

    def __post_init__(self):
        try:
            self.model_config()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.eval_mode not in ("", "full", "sparse"):
            raise ConfigError(f"eval_mode must be empty, 'full' or 'sparse', got {self.eval_mode!r}")

    def attn_config(self) -> AttnConfig:
        return AttnConfig(self.block_size, self.top_k, Mode(self.attn_mode), self.gate_enabled)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            n_kv_heads=self.n_kv_heads, head_dim=self.head_dim, vocab_size=self.vocab_size,
            rope_theta=self.rope_theta, norm_eps=self.norm_eps, tie_embeddings=self.tie_embeddings,
            ffn_mult=self.ffn_mult, init_std=self.init_std, attn=self.attn_config(),
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:10]

    def with_overrides(self, pairs) -> "RunConfig":
        return replace(self, **parse_pairs(pairs))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({typ})") from None
    return raw


def parse_pairs(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def parse_config_text(text: str) -> RunConfig:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        pairs.append(line)
    return RunConfig(**parse_pairs(pairs))


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = open(path).read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = parse_config_text(text)
    return cfg.with_overrides(overrides) if overrides else cfg


def int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def float_list(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]
