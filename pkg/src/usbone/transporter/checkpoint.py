"""``USTP`` checkpoint files.

Layout (all integers little-endian ``uint32``)::

    b"USTP" | version | records...
    record = name_len | name (utf-8) | rank | dims[rank] | float32 data

Records run to the end of the file. Model parameters and batch-norm buffers use
their ``state_dict`` names; Adam state is stored under ``optim.<slot>.<name>``.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"USTP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(path: str | os.PathLike, records: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in records.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_records(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a USTP checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 8
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            out[name] = data.reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def model_records(model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict[str, np.ndarray]:
    records = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                for slot, value in state.items():
                    records[f"optim.{slot}.{names[id(p)]}"] = torch.as_tensor(value).detach().cpu().numpy()
    return records


def save_checkpoint(path, model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> None:
    write_records(path, model_records(model, optimizer))


def load_checkpoint(path, model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> nn.Module:
    records = read_records(path)
    state = model.state_dict()
    missing = [k for k in state if k not in records]
    if missing:
        raise CheckpointError(f"{path}: missing records {missing[:3]}...")
    model.load_state_dict(
        {k: torch.from_numpy(records[k].copy()).to(state[k].dtype).reshape(state[k].shape) for k in state}
    )
    if optimizer is not None:
        params = dict(model.named_parameters())
        for key, value in records.items():
            if not key.startswith("optim."):
                continue
            _, slot, name = key.split(".", 2)
            p = params[name]
            optimizer.state[p][slot] = torch.from_numpy(value.copy()).reshape(value.shape)
    return model
