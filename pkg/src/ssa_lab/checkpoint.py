"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   8 bytes  b"SSALABCK"
    version u32
    hlen    u64      length of the JSON header
    header  hlen     UTF-8 JSON: run config text, step, rng state, tensor names
    tensors          per tensor: u16 name length, name, u8 ndim, u32 dims, float32 data
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig, parse_config_text
from .model import SSATransformer
from .training import TrainState, make_optimizer

MAGIC = b"SSALABCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    tensors: dict[str, np.ndarray]
    meta: dict


def _state_tensors(state: TrainState) -> tuple[dict[str, np.ndarray], dict]:
    model, opt = state.model, state.optimizer
    tensors = {f"param.{n}": p.detach().cpu().numpy() for n, p in model.named_parameters()}
    names = {id(p): n for n, p in model.named_parameters()}
    adam_steps = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"optim.{n}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            tensors[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            adam_steps[n] = float(st["step"])
    return tensors, {"adam_steps": adam_steps}


def encode(config: RunConfig, state: TrainState) -> bytes:
    tensors, optim_meta = _state_tensors(state)
    header = {
        "config": config.to_text(),
        "step": state.step,
        "rng": {"seed": config.seed, "data_seed": config.data_seed, "step": state.step},
        "initial_ce": state.initial_ce,
        "bad_streak": state.bad_streak,
        "tensors": list(tensors),
        **optim_meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hbytes)))
    buf.write(hbytes)
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save(path, config: RunConfig, state: TrainState) -> str:
    data = encode(config, state)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()[:12]


def decode(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} not supported (expected {VERSION})")
    off = 20
    try:
        header = json.loads(data[off:off + hlen])
        off += hlen
        tensors = {}
        for _ in header["tensors"]:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint body: {e}") from e
    if off != len(data):
        raise CheckpointError(f"corrupt checkpoint: {len(data) - off} trailing bytes")
    return Checkpoint(parse_config_text(header["config"]), header["step"], tensors, header)


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def checkpoint_id(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:12]


def restore(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> TrainState:
    """Rebuild model and optimizer exactly as they were saved."""
    cfg = ckpt.config
    model = SSATransformer(cfg.model_config()).to(dtype)
    with torch.no_grad():
        for n, p in model.named_parameters():
            key = f"param.{n}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks parameter {n}")
            p.copy_(torch.from_numpy(ckpt.tensors[key].copy()))
    opt = make_optimizer(model, cfg.train_config())
    for n, p in model.named_parameters():
        if n in ckpt.meta.get("adam_steps", {}):
            opt.state[p] = {
                "step": torch.tensor(ckpt.meta["adam_steps"][n], dtype=torch.float32),
                "exp_avg": torch.from_numpy(ckpt.tensors[f"optim.{n}.exp_avg"].copy()).to(dtype),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.{n}.exp_avg_sq"].copy()).to(dtype),
            }
    model.eval()
    return TrainState(model, opt, ckpt.step, ckpt.meta.get("initial_ce"), ckpt.meta.get("bad_streak", 0))
