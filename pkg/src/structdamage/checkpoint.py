"""Weight checkpoint container.

Layout::

    8 bytes   magic b"SDDCKPT\\n"
    8 bytes   header length, unsigned little-endian
    header    UTF-8 JSON: {"schema_version": 1, "meta": {...},
                           "tensors": [{"name", "shape", "dtype": "<f4", "offset", "nbytes"}]}
    payload   concatenated little-endian float32 tensors, offsets relative to payload start

Names are hierarchical module paths (``backbone.stages.0.transform.2.weight``).
The header is written with sorted keys and no whitespace so identical
weights give identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

MAGIC = b"SDDCKPT\n"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, problems: list[str]):
        super().__init__("checkpoint incompatible with model: " + "; ".join(problems))
        self.problems = problems


def dumps(tensors: Mapping[str, np.ndarray | torch.Tensor], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"schema_version": SCHEMA_VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {header.get('schema_version')}")
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]


def save(path: str | Path, tensors, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(tensors, meta))
    return path


def load(path: str | Path | io.BytesIO) -> tuple[dict[str, np.ndarray], dict]:
    data = path.getvalue() if isinstance(path, io.BytesIO) else Path(path).read_bytes()
    return loads(data)


def save_module(path, module: nn.Module, meta: dict | None = None) -> Path:
    return save(path, module.state_dict(), meta)


def load_into(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "",
              strict: bool = True) -> list[str]:
    """Copy ``tensors`` into ``module``.  Returns the names that were loaded.

    Only names starting with ``prefix`` are considered (the prefix is
    stripped).  Shape mismatches always raise; with ``strict`` so do missing
    or unexpected names.
    """
    state = module.state_dict()
    picked = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    problems = []
    for name, arr in picked.items():
        if name not in state:
            if strict:
                problems.append(f"unexpected {prefix}{name}")
        elif tuple(state[name].shape) != tuple(arr.shape):
            problems.append(f"{prefix}{name}: checkpoint {tuple(arr.shape)} vs model {tuple(state[name].shape)}")
    if strict:
        problems += [f"missing {prefix}{k}" for k in state if k not in picked]
    if problems:
        raise CheckpointMismatchError(problems)
    loaded = []
    with torch.no_grad():
        for name, arr in picked.items():
            if name in state:
                state[name].copy_(torch.as_tensor(arr, dtype=state[name].dtype))
                loaded.append(name)
    return loaded
