"""Sharded parameter server for sparse embeddings."""

from .server import ParamServer, RemoteShard, ShardRouter, ShardServer, TransportError, serve_shard
from .table import CheckpointError, EmbeddingTable, lazy_init, read_checkpoint, write_checkpoint
from .wire import Op, Request, Response, Status, WireError, decode_request, decode_response, encode_request, encode_response

__all__ = [
    "CheckpointError", "EmbeddingTable", "Op", "ParamServer", "RemoteShard", "Request", "Response",
    "ShardRouter", "ShardServer", "Status", "TransportError", "WireError", "decode_request",
    "decode_response", "encode_request", "encode_response", "lazy_init", "read_checkpoint",
    "serve_shard", "write_checkpoint",
]
