# %% [markdown]
# Block-sparse attention by hand
#
# Walk through one query: pool the keys into blocks, score the blocks, pick
# the top-k, and attend only inside them. Then check the library agrees.

# %%
import numpy as np
import torch

from ssa_lab.attention import (AttnConfig, block_pool, block_scores, block_selection_mask, full_attention,
                               select_topk, sparse_attention)

rng = np.random.default_rng(0)
T, heads, d = 24, 1, 8
q = torch.tensor(rng.normal(size=(T, heads, d)))
K = torch.tensor(rng.normal(size=(T, heads, d)))
V = torch.tensor(rng.normal(size=(T, heads, d)))
cfg = AttnConfig(block_size=4, top_k=3)
print("blocks:", cfg.n_blocks(T), "receptive field:", cfg.receptive_field)

# %%
# one block representative per 4 keys (the mean)
pooled = block_pool(K, cfg.block_size)[:, 0]
t = 21
scores = block_scores(q[t, 0], pooled)
print("block scores at t=21:", np.round(scores.numpy(), 3))

# own block (5) always goes in, the rest by score among visible blocks
sel = select_topk(scores, t, cfg)
print("selected blocks:", sel.blocks)

# %%
# attend by hand over the selected keys only
keys = [j for j in range(t + 1) if j // cfg.block_size in sel.blocks]
s = torch.stack([q[t, 0] @ K[j, 0] for j in keys]) / d ** 0.5
w = torch.softmax(s, 0)
by_hand = sum(wi * V[j, 0] for wi, j in zip(w, keys))
lib = sparse_attention(q, K, V, cfg)[t, 0]
print("max diff vs library:", (by_hand - lib).abs().max().item())

# %%
# the selection mask the library builds for every row at once
mask = block_selection_mask(q, K, cfg)[0]
print(mask.int().numpy())

# %%
# once k covers every block sparse attention is just full attention
cover = AttnConfig(4, cfg.n_blocks(T))
print("k >= B, max diff:", (sparse_attention(q, K, V, cover) - full_attention(q, K, V)).abs().max().item())
