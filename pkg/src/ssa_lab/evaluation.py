"""Perplexity, receptive-field and context-length sweeps, needle retrieval."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .attention import AttnConfig, Mode
from .data import NeedleSpec, TokenStream, gen_niah
from .metrics import collect_metrics


@dataclass
class EvalReport:
    task: str
    mode: str
    block_size: int
    top_k: int
    context_len: int
    ppl: float = float("nan")
    niah_accuracy: float = float("nan")
    sink_mass: float = float("nan")
    checkpoint_id: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


def _ids(stream) -> np.ndarray:
    return stream.ids if isinstance(stream, TokenStream) else np.asarray(stream, dtype=np.int64)


@torch.no_grad()
def _window_nll(model, inputs: np.ndarray, targets: np.ndarray, n_scored: int, mode, cfg) -> float:
    """Summed NLL (float64) of the last ``n_scored`` targets of one window."""
    logits = model.forward_inference(torch.from_numpy(inputs), mode, cfg)
    logp = torch.log_softmax(logits.double(), dim=-1)
    tgt = torch.from_numpy(targets)
    nll = -logp.gather(-1, tgt[:, None]).squeeze(-1)
    return float(nll[len(nll) - n_scored:].sum())


def _resolve(model, mode, cfg_override):
    cfg = cfg_override or model.cfg.attn
    mode = Mode(mode) if mode is not None else Mode.SPARSE
    return mode, cfg


def sliding_window_ppl(model, stream, T: int, stride: int = 256, mode: Mode | str | None = None,
                       cfg_override: AttnConfig | None = None) -> float:
    """Strided perplexity: windows of up to ``T`` tokens advance by ``stride``.

    Each window scores only the targets not already scored by the previous
    window, i.e. its final ``stride`` positions (all of them for the first).
    """
    if stride > T or stride < 1:
        raise ValueError(f"stride {stride} must lie in [1, T={T}]")
    ids = _ids(stream)
    n = len(ids)
    if n < 2:
        raise ValueError("perplexity needs a non-empty stream")
    mode, cfg = _resolve(model, mode, cfg_override)
    total, count, scored_to = 0.0, 0, 0
    begin = 0
    while scored_to < n - 1:
        end = min(begin + T, n - 1)
        n_new = end - scored_to
        total += _window_nll(model, ids[begin:end], ids[begin + 1:end + 1], n_new, mode, cfg)
        count += n_new
        scored_to = end
        begin += stride
    return math.exp(total / count)


def perplexity(model, stream, T: int, mode: Mode | str | None = None,
               cfg_override: AttnConfig | None = None) -> float:
    """exp(mean NLL) over non-overlapping windows of ``T`` (last window may be shorter)."""
    ids = _ids(stream)
    if len(ids) < 2:
        raise ValueError("perplexity needs a non-empty stream")
    mode, cfg = _resolve(model, mode, cfg_override)
    total, count = 0.0, 0
    for begin in range(0, len(ids) - 1, T):
        end = min(begin + T, len(ids) - 1)
        total += _window_nll(model, ids[begin:end], ids[begin + 1:end + 1], end - begin, mode, cfg)
        count += end - begin
    return math.exp(total / count)


@torch.no_grad()
def greedy_decode(model, prompt: np.ndarray, n_tokens: int, mode=None, cfg=None) -> np.ndarray:
    mode, cfg = _resolve(model, mode, cfg)
    seq = torch.from_numpy(np.asarray(prompt, dtype=np.int64))
    out = []
    for _ in range(n_tokens):
        nxt = model.forward_inference(seq, mode, cfg)[-1].argmax()
        out.append(int(nxt))
        seq = torch.cat([seq, nxt[None]])
    return np.asarray(out, dtype=np.int64)


def niah_grid(lengths: Sequence[int], depths: Sequence[float], n_per_cell: int = 4,
              seed: int = 0) -> list[list[list[NeedleSpec]]]:
    """[length][depth][sample] grid of single-token key/value needles."""
    from .data import KEYS, VALUES
    rng = np.random.default_rng([seed, 3])
    grid = []
    for L in lengths:
        row = []
        for d in depths:
            cell = []
            for i in range(n_per_cell):
                k = bytes([int(rng.choice(KEYS))])
                v = bytes([int(rng.choice(VALUES))])
                cell.append(NeedleSpec(L, k, v, d, filler_seed=int(rng.integers(1 << 30))))
            row.append(cell)
        grid.append(row)
    return grid


def niah_score(model, grid, mode: Mode | str | None = None, cfg_override: AttnConfig | None = None):
    """Exact-match greedy retrieval accuracy.

    Returns ``(overall_accuracy, per_cell)`` where ``per_cell`` has the grid's
    [length][depth] shape.
    """
    cells = np.zeros((len(grid), len(grid[0]) if grid else 0))
    for i, row in enumerate(grid):
        for j, specs in enumerate(row):
            hits = 0
            for spec in specs:
                sample = gen_niah(spec)
                got = greedy_decode(model, sample.tokens, len(sample.answer), mode, cfg_override)
                hits += int(np.array_equal(got, sample.answer))
            cells[i, j] = hits / len(specs)
    return float(cells.mean()) if cells.size else float("nan"), cells


def rf_sweep(model, stream, k_values: Iterable[int], block_size: int, T: int,
             niah: Optional[list] = None, checkpoint_id: str = "", seed: int = 0) -> list[EvalReport]:
    """PPL (and optionally NIAH) at each top-k, ending at the full-coverage k, plus a FULL row."""
    B = -(-T // block_size)
    ks = sorted({int(k) for k in k_values if k < B} | {B})
    rows = []
    base = model.cfg.attn
    for k in ks:
        cfg = replace(base, block_size=block_size, top_k=k, mode=Mode.SPARSE)
        r = EvalReport("rf-sweep", "sparse", block_size, k, T,
                       ppl=perplexity(model, stream, T, Mode.SPARSE, cfg),
                       checkpoint_id=checkpoint_id, seed=seed,
                       extra={"receptive_field": block_size * k, "full_equivalent": k >= B})
        if niah is not None:
            r.niah_accuracy = niah_score(model, niah, Mode.SPARSE, cfg)[0]
        rows.append(r)
    r = EvalReport("rf-sweep", "full", block_size, B, T,
                   ppl=perplexity(model, stream, T, Mode.FULL, base),
                   checkpoint_id=checkpoint_id, seed=seed,
                   extra={"receptive_field": T, "full_equivalent": True})
    if niah is not None:
        r.niah_accuracy = niah_score(model, niah, Mode.FULL, base)[0]
    rows.append(r)
    return rows


def context_extrapolation(model, stream, lengths: Sequence[int], train_T: int, n_sink_samples: int = 2,
                          checkpoint_id: str = "", seed: int = 0) -> list[EvalReport]:
    """PPL and sink mass at each context length, in FULL and trained-sparse modes."""
    ids = _ids(stream)
    rows = []
    for L in lengths:
        if L < train_T:
            raise ValueError(f"extrapolation length {L} is below the training length {train_T}")
        samples = [ids[i * L:(i + 1) * L] for i in range(n_sink_samples) if (i + 1) * L <= len(ids)]
        for mode in (Mode.FULL, Mode.SPARSE):
            cfg = model.cfg.attn
            r = EvalReport("extrapolation", mode.value, cfg.block_size, cfg.top_k, L,
                           ppl=perplexity(model, ids, L, mode, cfg), checkpoint_id=checkpoint_id, seed=seed,
                           extra={"ratio_to_train_len": L / train_T})
            if samples:
                r.sink_mass = collect_metrics(model, samples, cfg, mode).mean_sink
            rows.append(r)
    return rows


def write_reports(rows: Sequence[EvalReport], csv_path, json_path=None, extra: dict | None = None):
    dicts = [r.row() for r in rows]
    keys = []
    for d in dicts:
        keys += [k for k in d if k not in keys]
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(dicts)
    if json_path is not None:
        doc = {"rows": dicts}
        if extra:
            doc.update(extra)
        with open(json_path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True, default=str)
