"""Checkpoint archive: a JSON index of named tensors followed by their raw little-endian bytes.

Layout of ``weights.bin``::

    u64 little-endian  index length L
    L bytes            JSON {"tensors": {name: {"shape", "dtype", "offset", "nbytes"}}}
    ...                concatenated tensor data (offsets relative to the end of the index)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_tensors(tensors: dict[str, torch.Tensor], path: str | os.PathLike) -> dict:
    index, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        index[name] = {"shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    return index


def load_tensors(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", blob, 0)
    index = json.loads(blob[8 : 8 + n])["tensors"]
    base = 8 + n
    out = {}
    for name, e in index.items():
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated tensor {name} in {path}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        out[name] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model, optimizer=None, *, step=0, epoch=0, config=None, metrics=None) -> Path:
    """Write ``weights.bin`` (parameters + optimizer moments) and ``state.json`` under ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                tensors[f"optim.exp_avg.{name}"] = st["exp_avg"]
                tensors[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
                tensors[f"optim.step.{name}"] = torch.as_tensor(st["step"]).reshape(1).to(torch.float64)
    save_tensors(tensors, out / "weights.bin")
    config = config or {}
    state = {
        "step": int(step),
        "epoch": int(epoch),
        "config": config,
        "config_hash": config_hash(config),
        "metrics": metrics or {},
    }
    (out / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True))
    return out


def load_checkpoint(path, model, optimizer=None) -> dict:
    """Restore parameters (and optimizer moments when given) in place; returns the state record."""
    root = Path(path)
    tensors = load_tensors(root / "weights.bin")
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    ref = next(iter(model.parameters()))
    model.load_state_dict({k: v.to(ref.dtype) for k, v in params.items()})
    if optimizer is not None:
        by_name = dict(model.named_parameters())
        for name, p in by_name.items():
            key = f"optim.exp_avg.{name}"
            if key not in tensors:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"optim.step.{name}"][0])),
                "exp_avg": tensors[key].to(p.dtype),
                "exp_avg_sq": tensors[f"optim.exp_avg_sq.{name}"].to(p.dtype),
            }
    return json.loads((root / "state.json").read_text())
