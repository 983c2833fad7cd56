# %% [markdown]
# Evaluation sweeps through the command line
#
# Train a small checkpoint with the CLI, then run the receptive-field sweep,
# context extrapolation and needle retrieval on it. Everything is written
# under a temporary directory as CSV and JSON.

# %%
import csv
import tempfile
from pathlib import Path

from ssa_lab.cli import main

out = Path(tempfile.mkdtemp())
small = ["d_model=64", "head_dim=16", "context_len=64", "batch_size=8", "data_tokens=60000", "total_steps=120",
         "block_size=8", "top_k=2", "eval_k_values=1,2,4", "eval_lengths=64,128,256", "niah_lengths=64",
         "niah_depths=0,0.5,1", "niah_per_cell=4", "eval_samples=2", f"out_dir={out}"]
args = sum((["--set", kv] for kv in small), [])

# %%
main(["train", *args])
ckpt = out / "final.ckpt"

# %%
main(["eval", "--checkpoint", str(ckpt), "--tasks", "rf-sweep,extrapolation,niah", *args])
run, = out.glob("eval_*")

# %%
# one row per k, the full-equivalent k, then the FULL-mode row
for r in csv.DictReader(open(run / "rf_sweep.csv")):
    print(r["mode"], r["top_k"], r["receptive_field"], f"{float(r['ppl']):.3f}", r["niah_accuracy"])

# %%
for r in csv.DictReader(open(run / "extrapolation.csv")):
    print(r["mode"], r["context_len"], f"ppl {float(r['ppl']):.3f}", f"sink {float(r['sink_mass']):.3f}")
