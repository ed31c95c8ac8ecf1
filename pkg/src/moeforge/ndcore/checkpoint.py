"""Flat binary checkpoint container for named parameter tensors.

Record layout, repeated once per tensor (names sorted for determinism):

    uint32  name length (little-endian)
    bytes   UTF-8 name
    uint32  rank
    uint64  dims[rank] (little-endian)
    float64 payload, row-major little-endian

A JSON sidecar (same path with a ``.json`` suffix) carries the optimizer
step count and the config hash so a checkpoint is traceable to its run.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "sidecar_path"]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def save_checkpoint(
    path, params: dict[str, Tensor], step: int, config_hash: str
) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())
    meta = {"step": step, "config_hash": config_hash}
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Read a container back into {name: Tensor} plus the sidecar metadata."""
    path = Path(path)
    params: dict[str, Tensor] = {}
    blob = path.read_bytes()
    offset = 0
    total = len(blob)
    while offset < total:
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        params[name] = Tensor(data.reshape(dims).copy(), requires_grad=True)
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    return params, meta
