# %% [markdown]
# Attention diagnostics on a fresh model
#
# Entropy, top-k mass ("sparsity"), sink mass and the full-vs-sparse logit KL,
# first on single rows where the answer is known, then aggregated over a model.

# %%
import math

import numpy as np
import torch

from ssa_lab.attention import AttnConfig, Mode
from ssa_lab.data import gen_synthetic_corpus, windows
from ssa_lab.metrics import attn_entropy, attn_sparsity, collect_metrics, sink_mass
from ssa_lab.model import ModelConfig, build_model

# uniform row over 8 keys: entropy ln 8, two of four blocks hold half the mass
row = np.full(8, 1 / 8)
print(attn_entropy(row), math.log(8))
print(attn_sparsity(row, np.arange(8) // 2, {0, 3}))
print(sink_mass(row))     # first ceil(0.3*8)=3 keys

# %%
cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, n_kv_heads=2, head_dim=16, attn=AttnConfig(8, 2))
model = build_model(cfg, seed=0)
ids = gen_synthetic_corpus("key-value-recall", 2000, 1, episode_len=64).ids
samples = list(windows(ids, 64)[0][:4])

# %%
# weights are always the dense softmax maps; the mode decides what feeds the residual
for k in (1, 2, 4, 8):
    rec = collect_metrics(model, samples, AttnConfig(8, k), Mode.SPARSE)
    print(f"k={k}: sparsity {rec.mean_sparsity:.3f}  entropy {rec.mean_entropy:.3f}  "
          f"sink {rec.mean_sink:.3f}  logit KL {rec.logit_kl:.5f}")

# %%
# per layer, per head table of the last record
print(np.round(np.array(rec.sparsity), 3))
print(rec.aggregation)
