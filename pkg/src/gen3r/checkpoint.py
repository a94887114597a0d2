"""Single-file checkpoint container and determinism helpers.

Layout: 8-byte magic, little-endian uint64 header length, canonical JSON header
(config, metadata, tensor table), then raw little-endian float32 blobs in
table order.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GEN3RCK1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def save_checkpoint(path, state_dict, config: dict, meta: dict | None = None) -> str:
    """Write the container; returns the parameter hash."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(state_dict):
        arr = state_dict[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = canonical_json({"config": config, "meta": meta or {}, "tensors": table}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return parameter_hash(state_dict)


def load_checkpoint(path):
    """Returns (state_dict, config, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=start).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state, header["config"], header["meta"]


def parameter_hash(state_dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        arr = state_dict[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return parameter_hash(module.state_dict())


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
