"""NSLCKPT binary checkpoints.

Layout (all integers little-endian u32)::

    b"NSLCKPT\\0"  version=1
    len + UTF-8 architecture descriptor (LayerGraph.descriptor())
    repeated until EOF:
        len + UTF-8 block name, rank=4, dim0..dim3, float32 payload

Blocks of lower rank are stored with trailing unit dimensions.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError
from .graph import LayerGraph

MAGIC = b"NSLCKPT\0"
VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(graph: LayerGraph) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), _pack_str(graph.descriptor())]
    for name, arr in graph.params.items():
        dims = tuple(arr.shape) + (1,) * (4 - arr.ndim)
        out.append(_pack_str(name))
        out.append(struct.pack("<5I", 4, *dims))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(graph: LayerGraph, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(checkpoint_bytes(graph))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise OSError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint_bytes(data: bytes, precision="single", workers: int = 1) -> LayerGraph:
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("not an NSLCKPT file (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    graph = LayerGraph.from_descriptor(r.string(), precision, workers)
    expected = graph.params
    seen = set()
    while not r.done:
        name = r.string()
        rank, *dims = r.u32(5)
        if rank != 4:
            raise FormatError(f"block {name}: rank {rank}, expected 4")
        if name not in expected:
            raise FormatError(f"block {name} does not belong to the architecture")
        count = int(np.prod(dims))
        if count != expected[name].size:
            raise FormatError(f"block {name}: {count} values, architecture needs {expected[name].size}")
        payload = np.frombuffer(r.take(4 * count), dtype="<f4")
        graph.set_param(name, payload.reshape(expected[name].shape))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise OSError(f"checkpoint truncated: missing blocks {sorted(missing)}")
    return graph


def load_checkpoint(path, precision="single", workers: int = 1) -> LayerGraph:
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read(), precision, workers)
