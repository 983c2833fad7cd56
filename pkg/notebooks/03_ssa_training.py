# %% [markdown]
# Dual-stream training on key-value recall
#
# Three short runs with identical data and budgets: full-only, sparse-only,
# and the mixed objective (half the steps each mode, alignment weight 10).
# A few hundred steps is enough to see the orderings the acceptance suite
# checks over three seeds; numbers here are a single seed and shorter.

# %%
import torch

from ssa_lab.attention import Mode
from ssa_lab.config import RunConfig
from ssa_lab.data import BatchSampler, gen_synthetic_corpus
from ssa_lab.harness import eval_samples
from ssa_lab.metrics import collect_metrics
from ssa_lab.model import build_model
from ssa_lab.training import train

torch.set_num_threads(1)
STEPS = 250

base = RunConfig(total_steps=STEPS, data_tokens=200_000, eval_samples=4)
stream = gen_synthetic_corpus(base.data_kind, base.data_tokens, base.data_seed, base.context_len)
variants = {"FA": dict(p_full=1.0, alpha=0.0), "SA": dict(p_full=0.0, alpha=0.0), "SSA": dict(p_full=0.5, alpha=10.0)}

# %%
results = {}
for name, kw in variants.items():
    cfg = RunConfig(**{**base.__dict__, **kw})
    model = build_model(cfg.model_config(), seed=cfg.seed)
    sampler = BatchSampler(stream, cfg.context_len, cfg.batch_size, cfg.data_seed)
    state, log = train(model, sampler, cfg.train_config())
    rec = collect_metrics(state.model, eval_samples(cfg), cfg.attn_config(), Mode.FULL)
    results[name] = (log[-1]["ce"], rec)
    print(f"{name}: final ce {log[-1]['ce']:.3f}")

# %%
print(f"{'':5}{'sparsity':>10}{'entropy':>10}{'logit KL':>10}")
for name, (ce, rec) in results.items():
    print(f"{name:5}{rec.mean_sparsity:10.3f}{rec.mean_entropy:10.3f}{rec.logit_kl:10.4f}")
