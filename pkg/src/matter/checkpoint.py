"""Binary checkpoint container.

Layout, all integers little-endian u32::

    b"MTCK" | version | header length | header (UTF-8 JSON)
    then per tensor: name length | name | rank | extents... | f32 payload

The header carries the full run config, its hash, the iteration counter and
the tensor count. Tensors cover model parameters, the cluster bank, optimiser
velocities and the loss history, so a resumed run continues bit-identically.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, build_state, parse_assignments, serialize_config
from .numcore import SgdState
from .selfsup import TrainState

MAGIC = b"MTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    state: TrainState
    meta: dict


def _tensors(state: TrainState) -> list:
    named = state.model.named_parameters()
    out = [(f"param.{name}", p) for name, p in named]
    if not state.model.use_residual_encoder:
        # the bank is frozen but still used for word maps
        out += [("param.bank.centers", state.model.bank.centers), ("param.bank.log_s", state.model.bank.log_s)]
    out += [(f"velocity.{name}", v) for (name, _), v in zip(named, state.sgd.velocity)]
    out.append(("losses", np.asarray(state.losses, dtype=np.float32)))
    return out


def encode_checkpoint(cfg: RunConfig, state: TrainState) -> bytes:
    tensors = _tensors(state)
    header = {
        "config": serialize_config(cfg),
        "config_hash": cfg.config_hash(),
        "iteration": int(state.iteration),
        "tensors": len(tensors),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_checkpoint(state: TrainState, path, cfg: RunConfig) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(cfg, state))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals[0] if count == 1 else vals


def decode_checkpoint(data: bytes, expected_hash: str | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    cfg = RunConfig(**parse_assignments(header["config"].splitlines(), "<checkpoint>"))
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError("checkpoint header hash does not match its own config")
    if expected_hash is not None and expected_hash != header["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash']}, current run {expected_hash}"
        )
    tensors = {}
    for _ in range(header["tensors"]):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32("tensor rank")
        shape = tuple(np.atleast_1d(r.u32("tensor extents", rank))) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count, f"tensor {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    state = _restore(cfg, header, tensors)
    return Checkpoint(cfg, state, header)


def _restore(cfg: RunConfig, header: dict, tensors: dict) -> TrainState:
    state = build_state(cfg)
    model = state.model
    try:
        for name in list(model.params):
            model.params[name][...] = tensors[f"param.{name}"]
        model.bank.centers[...] = tensors["param.bank.centers"]
        model.bank.log_s[...] = tensors["param.bank.log_s"]
        velocity = [tensors[f"velocity.{name}"] for name, _ in model.named_parameters()]
        losses = tensors["losses"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"tensor shape mismatch: {exc}") from exc
    for v, (name, p) in zip(velocity, model.named_parameters()):
        if v.shape != p.shape:
            raise CheckpointError(f"velocity for {name} has shape {v.shape}, expected {p.shape}")
    state.sgd = SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay, velocity)
    state.iteration = int(header["iteration"])
    state.losses = [float(x) for x in losses]
    return state


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint {p} does not exist")
    return decode_checkpoint(p.read_bytes(), expected_hash)
