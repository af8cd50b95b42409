"""Versioned binary checkpoints.

Layout: the magic ``MSEQ1``, a little-endian u64 header length, a JSON header
(run metadata plus a manifest of ``name``/``shape``/``dtype``/``offset``), then
the raw little-endian tensor blobs in manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields

import numpy as np
import torch

from .config import TrainConfig
from .decoder import ModelConfig, ModeSeqModel
from .numerics import OptimizerState
from .training import TrainState

MAGIC = b"MSEQ1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "u1", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = {f"model/{n}": p.detach() for n, p in state.model.named_parameters()}
    opt = state.optimizer
    out.update({f"exp_avg/{n}": t for n, t in opt.exp_avg.items()})
    out.update({f"exp_avg_sq/{n}": t for n, t in opt.exp_avg_sq.items()})
    if state.rng_state is not None:
        out["rng"] = state.rng_state
    return out


def save_checkpoint(state: TrainState, path) -> None:
    tensors = _tensors(state)
    manifest, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob = t.contiguous().numpy().astype(_DTYPES[dtype], copy=False).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    opt = state.optimizer
    header = {
        "model_config": asdict(state.model.cfg),
        "train_config": asdict(state.config),
        "optimizer": {"lr": opt.lr, "weight_decay": opt.weight_decay, "betas": list(opt.betas),
                      "eps": opt.eps, "step": opt.step},
        "epoch": state.epoch,
        "history": _plain(state.history),
        "manifest": manifest,
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", data, pos)
        header = json.loads(data[pos + 8 : pos + 8 + n])
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    body = memoryview(data)[pos + 8 + n :]

    tensors = {}
    for entry in header["manifest"]:
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * np_dtype.itemsize
        if end > len(body):
            raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(body[start:end], dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))

    mcfg = ModelConfig(**header["model_config"])
    tcfg = TrainConfig(**{f.name: header["train_config"][f.name] for f in fields(TrainConfig)})
    param_dtype = next((t.dtype for k, t in tensors.items() if k.startswith("model/")), torch.get_default_dtype())
    previous = torch.get_default_dtype()
    torch.set_default_dtype(param_dtype)
    try:
        model = ModeSeqModel(mcfg)
    finally:
        torch.set_default_dtype(previous)
    params = dict(model.named_parameters())
    missing = [name for name in params if f"model/{name}" not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    with torch.no_grad():
        for name, p in params.items():
            src = tensors[f"model/{name}"]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(src)
    o = header["optimizer"]
    opt = OptimizerState(lr=o["lr"], weight_decay=o["weight_decay"], betas=tuple(o["betas"]), eps=o["eps"])
    opt.step = o["step"]
    opt.exp_avg = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("exp_avg/")}
    opt.exp_avg_sq = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("exp_avg_sq/")}
    return TrainState(model, opt, tcfg, header["epoch"], header["history"], tensors.get("rng"))
