"""Desk-scale lab for dual-stream sparse/full attention training and attention diagnostics."""

from .attention import AttnConfig, BlockSelection, Mode, block_pool, block_scores, full_attention, select_topk, sparse_attention
from .model import ModelConfig, SSATransformer, StreamOutput, build_model
from .training import TrainConfig, train

__version__ = "0.1.0"
