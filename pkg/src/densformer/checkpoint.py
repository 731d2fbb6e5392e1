"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DSTXCKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: config, fingerprint, metadata, tensor table
    ...       raw tensor data, little-endian float32/float64, in table order

Each tensor table entry records name, shape, dtype ("<f4" or "<f8"), byte
offset into the data section and byte length.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .model import ModelConfig, ModelWeights

MAGIC = b"DSTXCKPT"
VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH = {"<f4": torch.float32, "<f8": torch.float64}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, weights: ModelWeights, metadata: dict | None = None, extra: dict | None = None) -> None:
    """Write ``weights`` (and optional extra named tensors, e.g. optimizer
    moments) to ``path`` atomically."""
    entries, blobs, offset = [], [], 0
    items = [("param", k, v) for k, v in weights.tensors.items()]
    items += [("extra", k, v) for k, v in (extra or {}).items()]
    for kind, name, t in items:
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(code, copy=False).tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": weights.config.to_dict(),
        "fingerprint": weights.config.fingerprint(),
        "metadata": metadata or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(weights, metadata, extra)``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    base = start + hlen
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    params, extra = {}, {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {e['name']!r}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=lo)
        t = torch.from_numpy(arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("=")))
        if e["kind"] == "param":
            params[e["name"]] = t.requires_grad_(True)
        else:
            extra[e["name"]] = t
    return ModelWeights(config, params), header["metadata"], extra
