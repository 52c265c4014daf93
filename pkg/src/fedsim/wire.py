"""Binary formats for client/server rounds.

Frame layout::

    "FLV1" | msg_type u8 | payload_len u32 BE | payload | crc32(payload) u32 BE

Serialized parameters::

    tensor_count u32 BE
    per tensor: name_len u16 BE | name utf-8 | dtype u8 | rank u8 | dims u32 BE * rank
                | values, little-endian, row-major

dtype 0 is float32, 1 is float64. Message metadata (round, client_id, n_k as
u64 BE, metrics as float64 BE) precedes the serialized parameters.
"""

from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Callable

import numpy as np

from .model import ParamVector

MAGIC = b"FLV1"
HEADER = struct.Struct(">4sBI")
CRC = struct.Struct(">I")
MAX_PAYLOAD = 2**31
DEFAULT_PORT = 7070

DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


class MsgType(enum.IntEnum):
    JOIN_REQUEST = 1
    JOIN_ACCEPT = 2
    GLOBAL_MODEL = 3
    LOCAL_UPDATE = 4
    TARGET_REACHED = 5
    ABORT = 6


class WireError(Exception):
    """Base class for every malformed-bytes condition."""


class FrameError(WireError):
    pass


class BadMagic(FrameError):
    pass


class BadCRC(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class ShortRead(FrameError):
    pass


class PayloadTooLarge(FrameError):
    pass


class DecodeError(WireError):
    pass


class TruncatedBuffer(DecodeError):
    pass


class UnknownDType(DecodeError):
    pass


class SizeMismatch(DecodeError):
    pass


# --- parameters --------------------------------------------------------------

def encode_params(p: ParamVector, dtype: int = DTYPE_F64) -> bytes:
    if dtype not in _DTYPES:
        raise UnknownDType(f"unknown dtype code {dtype}")
    parts = [struct.pack(">I", len(p.layout))]
    for name, arr in p.tensors().items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long ({len(raw_name)} bytes)")
        shape = arr.shape
        if len(shape) > 0xFF:
            raise ValueError("tensor rank exceeds 255")
        parts.append(struct.pack(">H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(">BB", dtype, len(shape)))
        parts.append(struct.pack(f">{len(shape)}I", *shape))
        # float32 conversion rounds to nearest-even
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = memoryview(buf)
        self.pos = offset

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedBuffer(f"buffer ends inside {what} "
                                  f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s, what))

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def _decode_params(r: _Reader) -> ParamVector:
    (count,) = r.unpack(">I", "tensor_count")
    layout = []
    chunks = []
    for t in range(count):
        (name_len,) = r.unpack(">H", f"name_len of tensor {t}")
        try:
            name = bytes(r.take(name_len, f"name of tensor {t}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"tensor {t} name is not UTF-8") from exc
        dtype, rank = r.unpack(">BB", f"dtype/rank of tensor {name!r}")
        if dtype not in _DTYPES:
            raise UnknownDType(f"tensor {name!r} has unknown dtype code {dtype}")
        dims = r.unpack(f">{rank}I", f"dims of tensor {name!r}")
        nbytes = math.prod(dims) * _DTYPES[dtype].itemsize
        if nbytes > r.remaining:
            raise SizeMismatch(f"tensor {name!r} dims {dims} need {nbytes} value bytes, "
                               f"only {r.remaining} remain")
        raw = r.take(nbytes, f"values of tensor {name!r}")
        layout.append((name, dims))
        chunks.append(np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(np.float64))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    try:
        return ParamVector(tuple(layout), values)
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc


def decode_params(buf: bytes) -> ParamVector:
    r = _Reader(buf)
    p = _decode_params(r)
    if r.remaining:
        raise SizeMismatch(f"{r.remaining} trailing bytes after parameters")
    return p


# --- framing ----------------------------------------------------------------

def frame(msg_type: int, payload: bytes = b"") -> bytes:
    if msg_type not in MsgType._value2member_map_:
        raise UnknownMessageType(f"unknown message type {msg_type}")
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, msg_type, len(payload)) + payload + CRC.pack(zlib.crc32(payload))


def _read_exact(read: Callable[[int], bytes], n: int, what: str) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = read(min(n - got, 1 << 20))
        if not chunk:
            raise ShortRead(f"stream ended after {got} of {n} bytes of {what}")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> tuple[MsgType, bytes]:
    """Read one frame from a file-like object with ``read``.

    Raises a :class:`FrameError` subclass on any malformed input.
    """
    read = stream.read
    magic, msg_type, length = HEADER.unpack(_read_exact(read, HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if msg_type not in MsgType._value2member_map_:
        raise UnknownMessageType(f"unknown message type {msg_type}")
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    payload = _read_exact(read, length, "payload")
    (crc,) = CRC.unpack(_read_exact(read, CRC.size, "crc"))
    if crc != zlib.crc32(payload):
        raise BadCRC(f"crc mismatch: frame says {crc:#010x}, payload is {zlib.crc32(payload):#010x}")
    return MsgType(msg_type), payload


# --- message payloads ------------------------------------------------------------

@dataclass(frozen=True)
class GlobalModelMsg:
    round: int
    metric: float
    params: ParamVector

    def encode(self, dtype: int = DTYPE_F64) -> bytes:
        return struct.pack(">Qd", self.round, self.metric) + encode_params(self.params, dtype)

    @classmethod
    def decode(cls, payload: bytes) -> "GlobalModelMsg":
        r = _Reader(payload)
        rnd, metric = r.unpack(">Qd", "round/metric")
        return cls(rnd, metric, _decode_rest(r))


# the final model travels in the same shape as a broadcast
TargetReachedMsg = GlobalModelMsg


@dataclass(frozen=True)
class LocalUpdateMsg:
    round: int
    client_id: int
    n_k: int
    local_metric: float
    params: ParamVector

    def encode(self, dtype: int = DTYPE_F64) -> bytes:
        head = struct.pack(">QQQd", self.round, self.client_id, self.n_k, self.local_metric)
        return head + encode_params(self.params, dtype)

    @classmethod
    def decode(cls, payload: bytes) -> "LocalUpdateMsg":
        r = _Reader(payload)
        rnd, cid, n_k, metric = r.unpack(">QQQd", "update header")
        return cls(rnd, cid, n_k, metric, _decode_rest(r))


def _decode_rest(r: _Reader) -> ParamVector:
    p = _decode_params(r)
    if r.remaining:
        raise SizeMismatch(f"{r.remaining} trailing bytes after parameters")
    return p


def encode_client_id(client_id: int) -> bytes:
    return struct.pack(">Q", client_id)


def decode_client_id(payload: bytes) -> int:
    if len(payload) != 8:
        raise SizeMismatch(f"client id payload must be 8 bytes, got {len(payload)}")
    return struct.unpack(">Q", payload)[0]
