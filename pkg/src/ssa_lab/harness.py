"""Experiment orchestration shared by the CLI and the acceptance runs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .attention import Mode
from .config import RunConfig, float_list, int_list
from .data import BatchSampler, TokenStream, gen_synthetic_corpus, windows
from .evaluation import (EvalReport, context_extrapolation, niah_grid, niah_score, perplexity, rf_sweep,
                         sliding_window_ppl, write_reports)
from .metrics import collect_metrics, write_metrics_csv, write_metrics_json
from .model import build_model
from .training import TrainState, jsonl_logger, train

OUTPUT_ROOT_ENV = "SSA_LAB_OUTPUT_ROOT"
EVAL_TASKS = ("ppl", "sliding-ppl", "rf-sweep", "extrapolation", "niah", "metrics")


class DataError(ValueError):
    pass


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def training_stream(cfg: RunConfig) -> TokenStream:
    if cfg.data_path:
        try:
            raw = Path(cfg.data_path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read corpus {cfg.data_path}: {e}") from e
        ids = np.concatenate([[256], np.frombuffer(raw, dtype=np.uint8).astype(np.int64), [257]])
        return TokenStream(ids, [0])
    try:
        return gen_synthetic_corpus(cfg.data_kind, cfg.data_tokens, cfg.data_seed, episode_len=cfg.context_len)
    except ValueError as e:
        raise DataError(str(e)) from e


def eval_stream(cfg: RunConfig) -> TokenStream:
    if cfg.data_path:
        ids = training_stream(cfg).ids
        return TokenStream(ids[-cfg.eval_tokens:], [0])
    return gen_synthetic_corpus(cfg.data_kind, cfg.eval_tokens, cfg.eval_seed, episode_len=cfg.context_len)


def eval_samples(cfg: RunConfig, T: int | None = None) -> list[np.ndarray]:
    T = T or cfg.context_len
    ids = eval_stream(cfg).ids
    rows, _ = windows(ids, T)
    n_full = (len(ids) - 1) // T
    return [rows[i] for i in range(min(cfg.eval_samples, n_full))]


def run_training(cfg: RunConfig, resume: str | None = None, stop_at: int | None = None):
    """Train per ``cfg`` into its output directory; returns (state, records, checkpoint path)."""
    out = output_dir(cfg)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    tcfg = cfg.train_config()
    stream = training_stream(cfg)
    try:
        sampler = BatchSampler(stream, cfg.context_len, cfg.batch_size, cfg.data_seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    if resume:
        state = ckpt_io.restore(ckpt_io.load(resume))
        model = state.model
    else:
        model = build_model(cfg.model_config(), seed=cfg.seed)
        state = None
        log_path = out / "steps.jsonl"
        if log_path.exists():
            log_path.unlink()

    def on_eval(st: TrainState):
        ckpt_io.save(out / "checkpoints" / f"step_{st.step:06d}.ckpt", cfg, st)

    state, records = train(model, sampler, tcfg, state=state, log=jsonl_logger(out / "steps.jsonl"),
                           on_eval=on_eval, stop_at=stop_at)
    path = out / "final.ckpt" if state.step >= tcfg.total_steps else out / "checkpoints" / f"step_{state.step:06d}.ckpt"
    ckpt_io.save(path, cfg, state)
    return state, records, path


@dataclass
class LoadedModel:
    model: torch.nn.Module
    config: RunConfig
    checkpoint_id: str


def load_model(path) -> LoadedModel:
    ck = ckpt_io.load(path)
    state = ckpt_io.restore(ck)
    return LoadedModel(state.model, ck.config, ckpt_io.checkpoint_id(path))


def _eval_mode(cfg: RunConfig):
    return Mode(cfg.eval_mode) if cfg.eval_mode else None


def evaluate(loaded: LoadedModel, ecfg: RunConfig, tasks: Sequence[str]) -> dict[str, list]:
    """Run the requested tasks; returns task name -> rows (EvalReport or MetricsRecord)."""
    unknown = set(tasks) - set(EVAL_TASKS)
    if unknown:
        raise ValueError(f"unknown eval tasks {sorted(unknown)}; choose from {EVAL_TASKS}")
    model, mcfg, cid = loaded.model, loaded.config, loaded.checkpoint_id
    T = ecfg.eval_context_len or mcfg.context_len
    stream = eval_stream(ecfg)
    attn = model.cfg.attn
    forced = _eval_mode(ecfg)
    modes = [forced] if forced else [Mode.FULL, Mode.SPARSE]
    out: dict[str, list] = {}
    if "ppl" in tasks:
        out["ppl"] = [EvalReport("ppl", m.value, attn.block_size, attn.top_k, T,
                                 ppl=perplexity(model, stream, T, m, attn), checkpoint_id=cid, seed=mcfg.seed)
                      for m in modes]
    if "sliding-ppl" in tasks:
        out["sliding-ppl"] = [EvalReport("sliding-ppl", m.value, attn.block_size, attn.top_k, T,
                                         ppl=sliding_window_ppl(model, stream, T, min(ecfg.eval_stride, T), m, attn),
                                         checkpoint_id=cid, seed=mcfg.seed, extra={"stride": min(ecfg.eval_stride, T)})
                              for m in modes]
    grid = None
    if "niah" in tasks or "rf-sweep" in tasks:
        grid = niah_grid(int_list(ecfg.niah_lengths), float_list(ecfg.niah_depths), ecfg.niah_per_cell,
                         seed=ecfg.eval_seed)
    if "rf-sweep" in tasks:
        out["rf-sweep"] = rf_sweep(model, stream, int_list(ecfg.eval_k_values), attn.block_size, T,
                                   niah=grid if "niah" in tasks else None, checkpoint_id=cid, seed=mcfg.seed)
    if "niah" in tasks:
        rows = []
        for m in modes:
            acc, cells = niah_score(model, grid, m, attn)
            rows.append(EvalReport("niah", m.value, attn.block_size, attn.top_k, max(int_list(ecfg.niah_lengths)),
                                   niah_accuracy=acc, checkpoint_id=cid, seed=mcfg.seed,
                                   extra={"grid": json.dumps(cells.tolist())}))
        out["niah"] = rows
    if "extrapolation" in tasks:
        lengths = [L for L in int_list(ecfg.eval_lengths) if L >= mcfg.context_len]
        out["extrapolation"] = context_extrapolation(model, stream, lengths, mcfg.context_len,
                                                     checkpoint_id=cid, seed=mcfg.seed)
    if "metrics" in tasks:
        samples = eval_samples(ecfg, T)
        out["metrics"] = [collect_metrics(model, samples, attn, m) for m in modes]
    return out


def write_eval(results: dict[str, list], out: Path, meta: dict) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = {"meta": meta, "tasks": {}}
    for task, rows in results.items():
        stem = task.replace("-", "_")
        if task == "metrics":
            write_metrics_csv(rows, out / f"{stem}.csv")
            write_metrics_json(rows, out / f"{stem}.json", {"meta": meta})
            summary["tasks"][task] = [r.summary() for r in rows]
        else:
            write_reports(rows, out / f"{stem}.csv", out / f"{stem}.json", {"meta": meta})
            summary["tasks"][task] = [r.row() for r in rows]
        written.append(out / f"{stem}.csv")
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
    return written


COMPARE_COLUMNS = ("checkpoint", "label", "ppl_full", "ppl_sparse", "sparsity_full", "sparsity_sparse",
                   "entropy_full", "entropy_sparse", "sink_full", "sink_sparse", "logit_kl")


def compare(paths: Sequence[str], ecfg: RunConfig) -> list[dict]:
    """One row per checkpoint: PPL, AttnSparsity, AttnEntropy, sink mass per mode, and logit KL."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two checkpoints")
    loaded = [load_model(p) for p in paths]
    vocab = {l.model.cfg.vocab_size for l in loaded}
    if len(vocab) > 1:
        raise ValueError(f"checkpoints disagree on vocabulary size: {sorted(vocab)}")
    rows = []
    for path, l in zip(paths, loaded):
        res = evaluate(l, ecfg, ("ppl", "metrics"))
        ppl = {r.mode: r.ppl for r in res["ppl"]}
        met = {r.mode: r for r in res["metrics"]}
        c = l.config
        row = {"checkpoint": l.checkpoint_id,
               "label": f"p_full={c.p_full} alpha={c.alpha} s={c.block_size} k={c.top_k}"}
        for m in ("full", "sparse"):
            row[f"ppl_{m}"] = ppl.get(m, float("nan"))
            row[f"sparsity_{m}"] = met[m].mean_sparsity if m in met else float("nan")
            row[f"entropy_{m}"] = met[m].mean_entropy if m in met else float("nan")
            row[f"sink_{m}"] = met[m].mean_sink if m in met else float("nan")
        row["logit_kl"] = next(iter(met.values())).logit_kl
        rows.append(row)
    return rows


def write_compare(rows: list[dict], out: Path, meta: dict) -> Path:
    import csv
    out.mkdir(parents=True, exist_ok=True)
    path = out / "compare.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(COMPARE_COLUMNS))
        w.writeheader()
        w.writerows(rows)
    with open(out / "compare.json", "w") as f:
        json.dump({"meta": meta, "rows": rows}, f, indent=2, sort_keys=True)
    return path
