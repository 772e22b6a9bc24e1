"""Parameter checkpoint container.

Same tensor-record encoding as the wire format, under its own magic:

    4s magic "RSCK" | u8 version | u32 tensor count | tensor records

Model parts are stored in one file with head/, body/, tail/ (or full/)
name prefixes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CorruptionError, WireProtocolError
from .nn.params import ParamSet
from .wire import _U32, decode_tensor, encode_tensor

MAGIC = b"RSCK"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, bytes([VERSION]), _U32.pack(len(tensors))]
    parts.extend(encode_tensor(name, arr) for name, arr in tensors.items())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 9:
        raise CorruptionError("checkpoint too short")
    if data[:4] != MAGIC:
        raise WireProtocolError(f"bad checkpoint magic {data[:4]!r}")
    if data[4] != VERSION:
        raise WireProtocolError(f"unsupported checkpoint version {data[4]}")
    (count,) = _U32.unpack_from(data, 5)
    tensors: dict[str, np.ndarray] = {}
    offset = 9
    for _ in range(count):
        name, arr, offset = decode_tensor(data, offset)
        if name in tensors:
            raise CorruptionError(f"duplicate tensor {name!r}")
        tensors[name] = arr
    if offset != len(data):
        raise CorruptionError("trailing bytes in checkpoint")
    return tensors


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_param_sets(path, sets: dict[str, ParamSet]) -> None:
    tensors = {}
    for part, pset in sets.items():
        for name, arr in pset.tensors.items():
            tensors[f"{part}/{name}"] = arr
    save_tensors(path, tensors)


def load_param_sets(path, round_index: int = 0) -> dict[str, ParamSet]:
    tensors = load_tensors(path)
    sets: dict[str, ParamSet] = {}
    for full_name, arr in tensors.items():
        part, _, name = full_name.partition("/")
        if not name:
            raise CorruptionError(f"tensor {full_name!r} lacks a part prefix")
        sets.setdefault(part, ParamSet(part, {}, round_index)).tensors[name] = arr
    return sets
