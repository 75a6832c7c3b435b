"""Binary framing for parameter-server requests and responses.

Every frame is ``magic u32 | version u8 | opcode u8 | length u32`` followed
by ``length`` payload bytes, all little-endian. Responses echo the request
opcode and start their payload with a status byte.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = 0x47345250
VERSION = 1
HEADER = struct.Struct("<IBBI")
MAX_PAYLOAD = 1 << 30


class Op(enum.IntEnum):
    PULL = 1
    PUSH = 2
    SAVE = 3
    LOAD = 4
    PING = 5


class Status(enum.IntEnum):
    OK = 0
    BAD_REQUEST = 1
    DIM_MISMATCH = 2
    SERVER_ERROR = 3


class WireError(ValueError):
    """Malformed frame or payload."""


@dataclass
class Request:
    op: Op
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    grads: np.ndarray | None = None
    lr: float = 0.0
    path: str = ""

    def __eq__(self, other):
        if not isinstance(other, Request) or self.op != other.op:
            return False
        if self.op in (Op.PULL, Op.PUSH) and not np.array_equal(self.keys, other.keys):
            return False
        if self.op == Op.PUSH:
            return (self.grads.shape == other.grads.shape
                    and self.grads.tobytes() == other.grads.tobytes()
                    and np.float32(self.lr).tobytes() == np.float32(other.lr).tobytes())
        if self.op in (Op.SAVE, Op.LOAD):
            return self.path == other.path
        return True


@dataclass
class Response:
    op: Op
    status: Status = Status.OK
    dim: int = 0
    vectors: np.ndarray | None = None
    count: int = 0
    message: str = ""

    def __eq__(self, other):
        if not isinstance(other, Response):
            return False
        if (self.op, self.status) != (other.op, other.status):
            return False
        if self.status != Status.OK:
            return self.message == other.message
        if self.op == Op.PULL:
            return (self.dim == other.dim and self.vectors.shape == other.vectors.shape
                    and self.vectors.tobytes() == other.vectors.tobytes())
        if self.op == Op.PING:
            return self.dim == other.dim
        if self.op in (Op.SAVE, Op.LOAD):
            return self.count == other.count
        return True


def frame(op: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(op), len(payload)) + payload


def parse_header(data: bytes) -> tuple[Op, int]:
    if len(data) < HEADER.size:
        raise WireError("short frame header")
    magic, version, op, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    try:
        op = Op(op)
    except ValueError:
        raise WireError(f"unknown opcode {op}") from None
    if length > MAX_PAYLOAD:
        raise WireError(f"payload length {length} too large")
    return op, length


def _push_dtype(dim: int) -> np.dtype:
    return np.dtype([("key", "<u8"), ("grad", "<f4", (dim,))])


def encode_request(req: Request) -> bytes:
    op = Op(req.op)
    if op == Op.PULL:
        keys = np.asarray(req.keys, dtype="<u8")
        payload = struct.pack("<I", len(keys)) + keys.tobytes()
    elif op == Op.PUSH:
        keys = np.asarray(req.keys, dtype="<u8")
        grads = np.asarray(req.grads, dtype="<f4")
        if grads.ndim != 2 or grads.shape[0] != len(keys):
            raise WireError("push gradients must be (n, dim)")
        dim = grads.shape[1]
        rec = np.empty(len(keys), dtype=_push_dtype(dim))
        rec["key"] = keys
        rec["grad"] = grads
        payload = struct.pack("<IIf", len(keys), dim, req.lr) + rec.tobytes()
    elif op in (Op.SAVE, Op.LOAD):
        payload = req.path.encode("utf-8")
    else:
        payload = b""
    return frame(op, payload)


def decode_request(data: bytes) -> Request:
    op, length = parse_header(data)
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise WireError(f"payload is {len(payload)} bytes, header says {length}")
    return decode_request_payload(op, payload)


def decode_request_payload(op: Op, payload: bytes) -> Request:
    if op == Op.PULL:
        if len(payload) < 4:
            raise WireError("truncated PULL payload")
        (n,) = struct.unpack_from("<I", payload)
        if len(payload) != 4 + 8 * n:
            raise WireError(f"PULL payload length {len(payload)} does not match n={n}")
        keys = np.frombuffer(payload, dtype="<u8", count=n, offset=4).astype(np.uint64)
        return Request(op, keys)
    if op == Op.PUSH:
        if len(payload) < 12:
            raise WireError("truncated PUSH payload")
        n, dim, lr = struct.unpack_from("<IIf", payload)
        rec = _push_dtype(dim)
        if dim == 0 or len(payload) != 12 + n * rec.itemsize:
            raise WireError(f"PUSH payload length {len(payload)} does not match n={n}, dim={dim}")
        records = np.frombuffer(payload, dtype=rec, count=n, offset=12)
        return Request(op, records["key"].astype(np.uint64), records["grad"].astype(np.float32), lr)
    if op in (Op.SAVE, Op.LOAD):
        try:
            return Request(op, path=payload.decode("utf-8"))
        except UnicodeDecodeError:
            raise WireError("path is not valid UTF-8") from None
    if payload:
        raise WireError("PING carries no payload")
    return Request(op)


def encode_response(resp: Response) -> bytes:
    op = Op(resp.op)
    if resp.status != Status.OK:
        return frame(op, struct.pack("<B", resp.status) + resp.message.encode("utf-8"))
    if op == Op.PULL:
        vecs = np.asarray(resp.vectors, dtype="<f4")
        payload = struct.pack("<BI", 0, resp.dim) + vecs.tobytes()
    elif op == Op.PING:
        payload = struct.pack("<BI", 0, resp.dim)
    elif op in (Op.SAVE, Op.LOAD):
        payload = struct.pack("<BQ", 0, resp.count)
    else:
        payload = struct.pack("<B", 0)
    return frame(op, payload)


def decode_response(data: bytes) -> Response:
    op, length = parse_header(data)
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise WireError(f"payload is {len(payload)} bytes, header says {length}")
    return decode_response_payload(op, payload)


def decode_response_payload(op: Op, payload: bytes) -> Response:
    if not payload:
        raise WireError("empty response payload")
    try:
        status = Status(payload[0])
    except ValueError:
        raise WireError(f"unknown status {payload[0]}") from None
    if status != Status.OK:
        return Response(op, status, message=payload[1:].decode("utf-8", errors="replace"))
    if op == Op.PULL:
        if len(payload) < 5:
            raise WireError("truncated PULL response")
        (dim,) = struct.unpack_from("<I", payload, 1)
        body = len(payload) - 5
        if dim == 0 or body % (4 * dim):
            raise WireError("PULL response body is not a whole number of vectors")
        vecs = np.frombuffer(payload, dtype="<f4", offset=5).astype(np.float32).reshape(-1, dim)
        return Response(op, status, dim, vecs)
    if op == Op.PING:
        (dim,) = struct.unpack_from("<I", payload, 1)
        return Response(op, status, dim)
    if op in (Op.SAVE, Op.LOAD):
        (count,) = struct.unpack_from("<Q", payload, 1)
        return Response(op, status, count=count)
    return Response(op, status)
