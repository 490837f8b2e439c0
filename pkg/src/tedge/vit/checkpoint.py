"""Model checkpoint file.

Layout (all integers little-endian)::

    b"TEDG"                      magic
    uint32 version               currently 1
    uint32 n                     length of the config JSON
    n bytes                      UTF-8 JSON of ViTConfig.to_dict()
    float32[...] per parameter   in declaration order, row-major, little-endian

Parameter shapes are implied by the config, so no per-tensor headers exist.
"""
from __future__ import annotations

import json
import struct
from typing import IO

import numpy as np

from .config import ViTConfig
from .model import ViTModel, param_shapes

MAGIC = b"TEDG"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]


def save_checkpoint(model: ViTModel, stream: IO[bytes]) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<II", VERSION, len(cfg)))
    stream.write(cfg)
    for arr in model.params.values():
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(stream: IO[bytes]) -> ViTModel:
    if stream.read(4) != MAGIC:
        raise ValueError("not a TEDG checkpoint (bad magic)")
    version, n = struct.unpack("<II", stream.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ViTConfig.from_dict(json.loads(stream.read(n).decode("utf-8")))
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        raw = stream.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"truncated checkpoint while reading {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if stream.read(1):
        raise ValueError("trailing bytes after the last parameter")
    return ViTModel(config, params=params)
