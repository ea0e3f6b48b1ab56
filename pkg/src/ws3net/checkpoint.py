"""Versioned binary checkpoints: weights, masks, init snapshots, BN state.

Layout (all integers little-endian):

    magic "WSCK" | u32 version | u32 spec_len | spec JSON (canonical)
    | 32-byte sha256 of the spec JSON | u32 record count | records...
    | 32-byte sha256 of every preceding byte

Conv records hold the weight tensor, the bit-packed mask, and the init
snapshot; batch-norm records hold gamma, beta, and running statistics.
Records appear in the network's canonical module order, and loading
rebuilds the network from the embedded spec, so a well-formed file
round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointError
from .layers import BatchNorm, ResidualBlock, SparseConv
from .network import Network, NetworkSpec

MAGIC = b"WSCK"
VERSION = 1
_KIND_CONV = 0
_KIND_BN = 1


def _flat_modules(net: Network):
    """Conv and BN modules in canonical order, blocks expanded."""
    out = []
    for m in net.modules():
        if isinstance(m, ResidualBlock):
            out.extend(m.modules())
        elif isinstance(m, (SparseConv, BatchNorm)):
            out.append(m)
    return out


class _Writer:
    def __init__(self, f):
        self.f = f
        self.sha = hashlib.sha256()

    def write(self, data: bytes):
        self.f.write(data)
        self.sha.update(data)

    def u32(self, v: int):
        self.write(struct.pack("<I", v))

    def u64(self, v: int):
        self.write(struct.pack("<Q", v))

    def f64(self, v: float):
        self.write(struct.pack("<d", v))

    def name(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.write(raw)

    def array(self, a: np.ndarray):
        self.write(np.ascontiguousarray(a).tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self, shape, dtype) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n), dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, net: Network) -> None:
    """Write the network's full parameter state to path."""
    mods = _flat_modules(net)
    with open(path, "wb") as f:
        w = _Writer(f)
        w.write(MAGIC)
        w.u32(VERSION)
        spec_json = net.spec.canonical_json().encode("ascii")
        w.u32(len(spec_json))
        w.write(spec_json)
        w.write(hashlib.sha256(spec_json).digest())
        w.u32(len(mods))
        for m in mods:
            w.name(m.name)
            if isinstance(m, SparseConv):
                w.write(bytes([_KIND_CONV]))
                for dim in m.weights.w.shape:
                    w.u64(dim)
                w.array(m.weights.w)
                w.array(np.packbits(m.weights.mask.reshape(-1)))
                w.array(m.weights.w_init)
            else:
                w.write(bytes([_KIND_BN]))
                w.u64(m.channels)
                w.f64(m.eps)
                w.f64(m.momentum)
                w.array(m.gamma)
                w.array(m.beta)
                w.array(m.running_mean)
                w.array(m.running_var)
        f.write(w.sha.digest())


def load_checkpoint(path) -> Network:
    """Rebuild a network from a checkpoint, verifying integrity."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 44 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    r = _Reader(body, path)
    r.take(4)  # magic
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    spec_json = r.take(r.u32())
    if hashlib.sha256(spec_json).digest() != r.take(32):
        raise CheckpointError(f"{path}: embedded spec hash mismatch")
    try:
        spec = NetworkSpec.from_dict(json.loads(spec_json))
    except Exception as e:
        raise CheckpointError(f"{path}: bad embedded spec: {e}") from e
    net = Network(spec)
    dtype = spec.np_dtype()
    mods = _flat_modules(net)
    count = r.u32()
    if count != len(mods):
        raise CheckpointError(
            f"{path}: file has {count} records, network needs {len(mods)}"
        )
    for m in mods:
        name = r.name()
        if name != m.name:
            raise CheckpointError(
                f"{path}: record {name!r} where layer {m.name!r} expected"
            )
        kind = r.take(1)[0]
        if isinstance(m, SparseConv):
            if kind != _KIND_CONV:
                raise CheckpointError(f"{path}: record {name!r} is not a conv record")
            shape = tuple(r.u64() for _ in range(3))
            if shape != m.weights.w.shape:
                raise CheckpointError(
                    f"{path}: record {name!r} shape {shape} does not match "
                    f"layer shape {m.weights.w.shape}"
                )
            m.weights.w[...] = r.array(shape, dtype)
            size = int(np.prod(shape))
            packed = r.array(((size + 7) // 8,), np.uint8)
            mask = np.unpackbits(packed, count=size).reshape(shape)
            m.weights.mask[...] = mask
            m.weights._w_init = r.array(shape, dtype)
        else:
            if kind != _KIND_BN:
                raise CheckpointError(f"{path}: record {name!r} is not a bn record")
            channels = r.u64()
            if channels != m.channels:
                raise CheckpointError(
                    f"{path}: record {name!r} has {channels} channels, "
                    f"layer has {m.channels}"
                )
            m.eps = r.f64()
            m.momentum = r.f64()
            m.gamma[...] = r.array((channels,), dtype)
            m.beta[...] = r.array((channels,), dtype)
            m.running_mean[...] = r.array((channels,), dtype)
            m.running_var[...] = r.array((channels,), dtype)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")
    return net


def read_spec(path) -> NetworkSpec:
    """Parse only the embedded spec, without rebuilding the network."""
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        spec_len = struct.unpack("<I", head[8:12])[0]
        spec_json = f.read(spec_len)
        if len(spec_json) != spec_len:
            raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        return NetworkSpec.from_dict(json.loads(spec_json))
    except Exception as e:
        raise CheckpointError(f"{path}: bad embedded spec: {e}") from e
