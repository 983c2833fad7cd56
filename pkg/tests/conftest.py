import sys

import numpy as np
import pytest
import torch

from ssa_lab.attention import AttnConfig
from ssa_lab.model import ModelConfig, build_model

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(**kw) -> ModelConfig:
    attn = kw.pop("attn", AttnConfig(block_size=4, top_k=2))
    base = dict(n_layers=2, d_model=32, n_heads=4, n_kv_heads=2, head_dim=8, vocab_size=259, attn=attn)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def toy_model():
    return build_model(toy_config(), seed=0, dtype=torch.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
