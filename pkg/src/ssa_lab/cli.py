"""``ssa-lab`` command line: train, eval, compare."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .training import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssa-lab", description="Dual-stream sparse/full attention lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many total steps")

    e = sub.add_parser("eval", help="evaluate one checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", help="comma list overriding eval_tasks")

    c = sub.add_parser("compare", help="side-by-side table of several checkpoints")
    common(c)
    c.add_argument("--checkpoints", nargs="+", required=True)
    return p


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    state, records, path = harness.run_training(cfg, resume=args.resume, stop_at=args.stop_at)
    last = records[-1] if records else {"ce": float("nan"), "align": float("nan")}
    print(f"step {state.step}: ce={last['ce']:.4f} align={last['align']:.6f} checkpoint={path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    loaded = harness.load_model(args.checkpoint)
    ecfg = load_config(args.config, args.set)
    tasks = [t.strip() for t in (args.tasks or ecfg.eval_tasks).split(",") if t.strip()]
    try:
        results = harness.evaluate(loaded, ecfg, tasks)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = harness.output_dir(ecfg) / f"eval_{loaded.checkpoint_id}_{ecfg.digest()}"
    harness.write_eval(results, out, {"checkpoint_id": loaded.checkpoint_id, "config_hash": ecfg.digest(),
                                      "checkpoint": str(args.checkpoint), "tasks": tasks})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ecfg = load_config(args.config, args.set)
    try:
        rows = harness.compare(args.checkpoints, ecfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    ids = "_".join(r["checkpoint"][:6] for r in rows)
    out = harness.output_dir(ecfg) / f"compare_{ids}_{ecfg.digest()}"
    path = harness.write_compare(rows, out, {"config_hash": ecfg.digest(), "checkpoints": args.checkpoints})
    for r in rows:
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
