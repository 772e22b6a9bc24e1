"""Versioned binary message format for party-to-party traffic.

Frame layout (all integers little-endian):

    u32  frame length (bytes after this field)
    4s   magic "RSFL"
    u8   version (currently 1)
    u8   kind
    u32  round   u16 client   u16 epoch   u32 batch
    u16  tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8  dtype tag (1 = float64, 2 = float32)
        u8  ndim
        u32 x ndim  dims
        raw row-major little-endian payload

Only activation, gradient, and weight kinds may carry tensors; control
kinds must have an empty payload. There is deliberately no kind that
could carry raw inputs, labels, final outputs, or skip activations off
a client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CorruptionError, FramingError, WireProtocolError

MAGIC = b"RSFL"
VERSION = 1

_HEADER = struct.Struct("<4sBBIHHIH")  # magic, version, kind, round, client, epoch, batch, n_tensors
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class Kind(IntEnum):
    ACT_UP = 1       # boundary activation, client -> computation server
    ACT_DOWN = 2     # boundary activation, computation server -> client
    GRAD_UP = 3      # boundary gradient, client -> computation server
    GRAD_DOWN = 4    # boundary gradient, computation server -> client
    WEIGHTS_UP = 5   # one part's parameters, client -> aggregation server
    WEIGHTS_DOWN = 6  # broadcast parameters, aggregation server -> client
    ROUND_BEGIN = 7
    ROUND_END = 8
    SHUTDOWN = 9
    HELLO = 10       # TCP handshake frame carrying the client id


DATA_KINDS = frozenset({Kind.ACT_UP, Kind.ACT_DOWN, Kind.GRAD_UP, Kind.GRAD_DOWN,
                        Kind.WEIGHTS_UP, Kind.WEIGHTS_DOWN})
CONTROL_KINDS = frozenset({Kind.ROUND_BEGIN, Kind.ROUND_END, Kind.SHUTDOWN, Kind.HELLO})

_DTYPE_TAGS = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_TAG_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


@dataclass
class WireMessage:
    kind: Kind
    round_index: int = 0
    client_id: int = 0
    epoch: int = 0
    batch: int = 0
    payload: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def validate(self) -> None:
        if self.kind not in set(Kind):
            raise CorruptionError(f"unknown message kind {self.kind!r}")
        if self.kind in CONTROL_KINDS and self.payload:
            raise CorruptionError(f"{Kind(self.kind).name} must not carry tensors")
        for bound, value, what in ((1 << 32, self.round_index, "round"),
                                   (1 << 16, self.client_id, "client"),
                                   (1 << 16, self.epoch, "epoch"),
                                   (1 << 32, self.batch, "batch")):
            if not 0 <= value < bound:
                raise CorruptionError(f"{what} field {value} out of range")

    def key(self) -> tuple:
        return (int(self.kind), self.round_index, self.client_id, self.epoch, self.batch)

    def equals(self, other: "WireMessage") -> bool:
        return (self.key() == other.key()
                and self.version == other.version
                and list(self.payload) == list(other.payload)
                and all(self.payload[k].dtype == other.payload[k].dtype
                        and np.array_equal(self.payload[k], other.payload[k])
                        for k in self.payload))


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_TAGS:
        raise CorruptionError(f"unsupported tensor dtype {dtype}")
    name_b = name.encode("utf-8")
    if len(name_b) >= 1 << 16:
        raise CorruptionError("tensor name too long")
    if arr.ndim >= 1 << 8:
        raise CorruptionError("too many dimensions")
    parts = [_U16.pack(len(name_b)), name_b,
             struct.pack("<BB", _DTYPE_TAGS[dtype], arr.ndim)]
    parts.extend(_U32.pack(d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes, offset: int) -> tuple[str, np.ndarray, int]:
    def need(n: int) -> None:
        if offset + n > len(buf):
            raise CorruptionError("tensor record extends past the frame")

    need(2)
    (name_len,) = _U16.unpack_from(buf, offset)
    offset += 2
    need(name_len + 2)
    try:
        name = buf[offset:offset + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError("tensor name is not valid UTF-8") from exc
    offset += name_len
    tag, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if tag not in _TAG_DTYPES:
        raise CorruptionError(f"unknown dtype tag {tag}")
    need(4 * ndim)
    dims = struct.unpack_from(f"<{ndim}I", buf, offset) if ndim else ()
    offset += 4 * ndim
    dtype = _TAG_DTYPES[tag]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    need(nbytes)
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    offset += nbytes
    return name, arr.astype(dtype.newbyteorder("="), copy=True), offset


def encode(msg: WireMessage) -> bytes:
    """Full frame, including the length prefix; decode() inverts it bit-exactly."""
    msg.validate()
    if msg.version != VERSION:
        raise WireProtocolError(f"cannot encode version {msg.version}")
    if len(msg.payload) >= 1 << 16:
        raise CorruptionError("too many tensors")
    body = [_HEADER.pack(MAGIC, msg.version, int(msg.kind), msg.round_index,
                         msg.client_id, msg.epoch, msg.batch, len(msg.payload))]
    for name, arr in msg.payload.items():
        body.append(encode_tensor(name, arr))
    frame = b"".join(body)
    return _U32.pack(len(frame)) + frame


def decode(data: bytes) -> WireMessage:
    """Decode one frame (length prefix included) from the front of data."""
    if len(data) < 4:
        raise FramingError("missing length prefix")
    (frame_len,) = _U32.unpack_from(data, 0)
    if len(data) - 4 < frame_len:
        raise FramingError(f"frame declares {frame_len} bytes, {len(data) - 4} available")
    if frame_len < _HEADER.size:
        raise FramingError("frame shorter than the fixed header")
    buf = data[4:4 + frame_len]
    magic, version, kind_tag, round_index, client_id, epoch, batch, n_tensors = \
        _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireProtocolError(f"unsupported version {version}")
    try:
        kind = Kind(kind_tag)
    except ValueError as exc:
        raise CorruptionError(f"unknown kind tag {kind_tag}") from exc
    payload: dict[str, np.ndarray] = {}
    offset = _HEADER.size
    for _ in range(n_tensors):
        name, arr, offset = decode_tensor(buf, offset)
        if name in payload:
            raise CorruptionError(f"duplicate tensor name {name!r}")
        payload[name] = arr
    if offset != len(buf):
        raise CorruptionError(f"{len(buf) - offset} trailing bytes in frame")
    msg = WireMessage(kind, round_index, client_id, epoch, batch, payload, version)
    msg.validate()
    return msg
