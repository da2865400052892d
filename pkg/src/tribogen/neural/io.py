"""Binary checkpoint files.

Layout (little endian)::

    b"TRIBOGEN-CKPT1\\0\\0"   16-byte magic
    32 bytes                 sha256 of the network spec
    uint64                   payload float count
    float32[count]           params, buffers, adam m, adam v (trailer order)
    uint64                   trailer byte length
    utf-8 JSON               spec, tensor names/shapes, step, seed, meta
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Checkpoint, NetworkSpec, VAE

CKPT_MAGIC = b"TRIBOGEN-CKPT1\0\0"
CKPT_VERSION = 1
GROUPS = ("params", "buffers", "adam_m", "adam_v")  # payload order


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(checkpoint: Checkpoint, path):
    model = checkpoint.model
    groups = {"params": model.params, "buffers": model.buffers,
              "adam_m": checkpoint.adam_m, "adam_v": checkpoint.adam_v}
    layout, chunks = {}, []
    for group, tensors in groups.items():
        layout[group] = [[name, list(np.shape(t))] for name, t in tensors.items()]
        chunks.extend(np.asarray(t, dtype="<f4").ravel() for t in tensors.values())
    payload = np.concatenate(chunks) if chunks else np.empty(0, "<f4")
    trailer = json.dumps({
        "version": CKPT_VERSION,
        "spec": model.spec.to_dict(),
        "layout": layout,
        "step": checkpoint.step,
        "rng": {"seed": checkpoint.seed, "step": checkpoint.step},
        "meta": checkpoint.meta,
    }, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(model.spec.digest())
        fh.write(np.uint64(payload.size).astype("<u8").tobytes())
        fh.write(payload.astype("<f4").tobytes())
        fh.write(np.uint64(len(trailer)).astype("<u8").tobytes())
        fh.write(trailer)
    return path


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:16] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic")
    digest = data[16:48]
    count = int(np.frombuffer(data[48:56], "<u8")[0])
    end = 56 + 4 * count
    payload = np.frombuffer(data[56:end], "<f4")
    tlen = int(np.frombuffer(data[end:end + 8], "<u8")[0])
    trailer = json.loads(data[end + 8:end + 8 + tlen])
    if trailer.get("version") != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version")
    spec = NetworkSpec.from_dict(trailer["spec"])
    if spec.digest() != digest:
        raise CheckpointFormatError(f"{path}: spec digest mismatch")
    tensors, offset = {}, 0
    for group in GROUPS:
        tensors[group] = {}
        for name, shape in trailer["layout"][group]:
            size = int(np.prod(shape)) if shape else 1
            tensors[group][name] = payload[offset:offset + size].reshape(shape).astype(dtype)
            offset += size
    if offset != count:
        raise CheckpointFormatError(f"{path}: payload size mismatch")
    model = VAE(spec, 0, dtype)
    model.set_params(tensors["params"])
    model.set_buffers(tensors["buffers"])
    if np.any(np.concatenate([b.ravel() for k, b in model.buffers.items()
                              if k.endswith("running_var")] or [np.ones(1)]) <= 0):
        raise CheckpointFormatError(f"{path}: non-positive running variance")
    rng = trailer.get("rng", {})
    return Checkpoint(model, int(trailer["step"]), tensors["adam_m"], tensors["adam_v"],
                      int(rng.get("seed", 0)), trailer.get("meta", {}))
