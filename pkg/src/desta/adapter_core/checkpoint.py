"""Versioned binary checkpoint container for adapter parameters.

Byte layout (all integers little-endian):

    bytes 0..7    magic b"DSTADPT1"
    bytes 8..11   format version, uint32 (currently 1)
    bytes 12..19  header length in bytes, uint64
    header        UTF-8 JSON of that length:
                    {"dims": {...AdapterDims fields...},
                     "l_sel": [tapped layer ids],
                     "step_count": int,
                     "rng_state": {...},
                     "tensors": [{"name": str, "shape": [int...],
                                  "dtype": "<f8"}, ...]}
    payload       each tensor's raw C-contiguous little-endian float64
                  bytes, concatenated in header order

The tensor list is the adapter's named-tensor order, so a checkpoint is
byte-reproducible for identical parameters.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from ..errors import DestaError
from .params import AdapterDims, AdapterParams, init_adapter

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"DSTADPT1"
_VERSION = 1


class CheckpointError(DestaError):
    pass


def save_checkpoint(
    path: str,
    params: AdapterParams,
    dims: AdapterDims,
    step_count: int,
    rng_state: dict | None = None,
):
    tensors = list(params.named_tensors())
    header = {
        "dims": dataclasses.asdict(dims),
        "l_sel": list(dims.layers),
        "step_count": step_count,
        "rng_state": rng_state or {},
        "tensors": [
            {"name": name, "shape": list(t.shape), "dtype": "<f8"} for name, t in tensors
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, tensor in tensors:
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[AdapterParams, AdapterDims, int, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not an adapter checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        dims_fields = dict(header["dims"])
        dims_fields["layers"] = tuple(dims_fields["layers"])
        dims = AdapterDims(**dims_fields)
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated payload at tensor {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    # Rebuild the containers by walking a template of the right shape.
    template = init_adapter(dims, 0)
    for name, tensor in template.named_tensors():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(
                f"tensor {name} has shape {arrays[name].shape}, expected {tensor.shape}"
            )
        tensor[...] = arrays[name]
    return template, dims, int(header["step_count"]), header.get("rng_state", {})
