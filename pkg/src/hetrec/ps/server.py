"""TCP shard server, remote shard client and the sharded client facade."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from typing import Sequence

import numpy as np

from . import wire
from .table import EmbeddingTable, read_checkpoint, write_checkpoint
from .wire import Op, Request, Response, Status, WireError

log = logging.getLogger(__name__)


class TransportError(ConnectionError):
    """A shard could not be reached; the call may be retried."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def handle_request(table: EmbeddingTable, req: Request) -> Response:
    try:
        if req.op == Op.PULL:
            return Response(Op.PULL, dim=table.dim, vectors=table.pull(req.keys.tolist()))
        if req.op == Op.PUSH:
            if req.grads.shape[1] != table.dim:
                return Response(Op.PUSH, Status.DIM_MISMATCH,
                                message=f"gradient dim {req.grads.shape[1]} != table dim {table.dim}")
            lr = None if np.isnan(req.lr) else float(req.lr)
            table.push(req.keys.tolist(), req.grads, lr=lr)
            return Response(Op.PUSH)
        if req.op == Op.SAVE:
            return Response(Op.SAVE, count=table.save(req.path))
        if req.op == Op.LOAD:
            return Response(Op.LOAD, count=table.load(req.path))
        return Response(Op.PING, dim=table.dim)
    except Exception as exc:  # reported to the client as an error frame
        return Response(req.op, Status.SERVER_ERROR, message=f"{type(exc).__name__}: {exc}")


class _ShardHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        table = self.server.table
        while True:
            try:
                header = _recv_exact(sock, wire.HEADER.size)
            except (EOFError, OSError):
                return
            try:
                op, length = wire.parse_header(header)
                payload = _recv_exact(sock, length)
                req = wire.decode_request_payload(op, payload)
            except (WireError, EOFError) as exc:
                op_byte = header[5] if len(header) > 5 else 0
                err = Response(Op.PING, Status.BAD_REQUEST, message=str(exc))
                try:
                    sock.sendall(wire.frame(op_byte, wire.encode_response(err)[wire.HEADER.size:]))
                except OSError:
                    pass
                return
            sock.sendall(wire.encode_response(handle_request(table, req)))


class ShardServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, table: EmbeddingTable, address: tuple[str, int]):
        self.table = table
        super().__init__(address, _ShardHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve_shard(table: EmbeddingTable, host: str = "127.0.0.1", port: int = 0,
                background: bool = False) -> ShardServer:
    """Bind a shard server; serve in a daemon thread if ``background``."""
    server = ShardServer(table, (host, port))
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server


class RemoteShard:
    """Client for one shard server. One request in flight per connection."""

    def __init__(self, endpoint: str, retries: int = 3, backoff: float = 0.05, timeout: float = 30.0):
        host, _, port = endpoint.rpartition(":")
        self.address = (host, int(port))
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self.dim = self._call(Request(Op.PING)).dim

    def _connect(self):
        sock = socket.create_connection(self.address, timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def _call(self, req: Request) -> Response:
        data = wire.encode_request(req)
        last = None
        with self._lock:
            for attempt in range(self.retries + 1):
                try:
                    if self._sock is None:
                        self._sock = self._connect()
                    self._sock.sendall(data)
                    op, length = wire.parse_header(_recv_exact(self._sock, wire.HEADER.size))
                    resp = wire.decode_response_payload(op, _recv_exact(self._sock, length))
                    break
                except (OSError, EOFError) as exc:
                    last = exc
                    self.close_locked()
                    time.sleep(self.backoff * (2 ** attempt))
            else:
                raise TransportError(f"shard {self.address[0]}:{self.address[1]} unreachable: {last}")
        if resp.status == Status.DIM_MISMATCH:
            raise ValueError(resp.message)
        if resp.status != Status.OK:
            raise RuntimeError(f"shard error: {resp.message}")
        return resp

    def close_locked(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self):
        with self._lock:
            self.close_locked()

    def pull(self, keys) -> np.ndarray:
        return self._call(Request(Op.PULL, np.asarray(list(keys), dtype=np.uint64))).vectors

    def push(self, keys, grads, lr: float | None = None) -> None:
        grads = np.asarray(grads, dtype=np.float32)
        if grads.ndim != 2 or grads.shape != (len(keys), self.dim):
            raise ValueError(f"gradient shape {grads.shape} does not match ({len(keys)}, {self.dim})")
        self._call(Request(Op.PUSH, np.asarray(list(keys), dtype=np.uint64), grads,
                           float("nan") if lr is None else lr))

    def save(self, path) -> int:
        return self._call(Request(Op.SAVE, path=str(path))).count

    def load(self, path) -> int:
        return self._call(Request(Op.LOAD, path=str(path))).count


class ShardRouter:
    """Routes key ``k`` to shard ``k % num_shards``."""

    def __init__(self, endpoints: Sequence):
        if not endpoints:
            raise ValueError("need at least one shard")
        self.endpoints = list(endpoints)

    @property
    def num_shards(self) -> int:
        return len(self.endpoints)

    def shard(self, key: int) -> int:
        return int(key) % len(self.endpoints)

    def split(self, keys: np.ndarray) -> list[np.ndarray]:
        """Positions of ``keys`` owned by each shard."""
        owner = np.asarray(keys, dtype=np.uint64) % np.uint64(len(self.endpoints))
        return [np.nonzero(owner == s)[0] for s in range(len(self.endpoints))]


class ParamServer:
    """Sharded pull/push facade over in-process tables or remote shards."""

    def __init__(self, shards: Sequence, lr: float | None = None):
        self.router = ShardRouter(shards)
        dims = {s.dim for s in shards}
        if len(dims) != 1:
            raise ValueError(f"shards disagree on dim: {sorted(dims)}")
        self.dim = dims.pop()
        self.lr = lr
        self.pull_calls = 0
        self.pulled_keys = 0

    @classmethod
    def local(cls, num_shards: int = 1, dim: int = 64, init_seed: int = 0, **table_kwargs) -> "ParamServer":
        return cls([EmbeddingTable(dim, init_seed, **table_kwargs) for _ in range(num_shards)])

    @classmethod
    def remote(cls, endpoints: Sequence[str], **client_kwargs) -> "ParamServer":
        return cls([RemoteShard(e, **client_kwargs) for e in endpoints])

    @property
    def shards(self):
        return self.router.endpoints

    def pull(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
        self.pull_calls += 1
        self.pulled_keys += len(keys)
        out = np.empty((len(keys), self.dim), dtype=np.float32)
        for shard, pos in zip(self.shards, self.router.split(keys)):
            if len(pos):
                out[pos] = shard.pull(keys[pos].tolist())
        return out

    def push(self, keys, grads, lr: float | None = None) -> None:
        keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
        grads = np.asarray(grads, dtype=np.float32)
        if grads.ndim != 2 or grads.shape != (len(keys), self.dim):
            raise ValueError(f"gradient shape {grads.shape} does not match ({len(keys)}, {self.dim})")
        lr = self.lr if lr is None else lr
        for shard, pos in zip(self.shards, self.router.split(keys)):
            if len(pos):
                shard.push(keys[pos].tolist(), grads[pos], lr)

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """All entries across in-process shards."""
        keys, vecs = [], []
        for shard in self.shards:
            if not isinstance(shard, EmbeddingTable):
                raise TypeError("items() needs in-process shards; use save() for remote ones")
            k, v = shard.items()
            keys.append(k)
            vecs.append(v)
        return np.concatenate(keys), np.concatenate(vecs)

    def save(self, path) -> int:
        if all(isinstance(s, EmbeddingTable) for s in self.shards):
            keys, vecs = self.items()
            return write_checkpoint(path, self.dim, keys, vecs)
        # remote shards write per-shard files next to ``path`` and are merged here
        parts = []
        for i, shard in enumerate(self.shards):
            part = f"{path}.shard{i}"
            shard.save(part)
            parts.append(read_checkpoint(part, expect_dim=self.dim))
        keys = np.concatenate([p[0] for p in parts])
        vecs = np.concatenate([p[1] for p in parts])
        return write_checkpoint(path, self.dim, keys, vecs)

    def load(self, path) -> int:
        keys, vecs = read_checkpoint(path, expect_dim=self.dim)
        if all(isinstance(s, EmbeddingTable) for s in self.shards):
            self.set(keys, vecs)
            return len(keys)
        for i, (shard, pos) in enumerate(zip(self.shards, self.router.split(keys))):
            part = f"{path}.shard{i}"
            write_checkpoint(part, self.dim, keys[pos], vecs[pos])
            shard.load(part)
        return len(keys)

    def set(self, keys, vectors) -> None:
        keys = np.asarray(keys, dtype=np.uint64)
        vectors = np.asarray(vectors, dtype=np.float32)
        for shard, pos in zip(self.shards, self.router.split(keys)):
            if not len(pos):
                continue
            if isinstance(shard, EmbeddingTable):
                shard.set(keys[pos].tolist(), vectors[pos])
            else:
                raise TypeError("direct set() is only supported on in-process shards")
