"""The "RRCW" weight container.

Layout (all integers little-endian)::

    magic      4 bytes  b"RRCW"
    version    u16      (currently 1)
    arch_len   u16      then arch_len bytes: architecture id, ASCII
    meta_len   u32      then meta_len bytes: UTF-8 JSON {"spec": ..., "meta": ...}
    n_blocks   u32
    per block:
        name_len u16, name (UTF-8)
        ndim     u8, dims u32 * ndim
        weights  f32 * prod(dims)
        has_bias u8; if 1: bias_len u32, bias f32 * bias_len
    crc32      u32 over every preceding byte

The JSON ``spec`` holds the build configuration (:class:`ArchSpec`), so a
checkpoint rebuilds its network without outside information; ``meta``
carries free-form extras such as the normalisation statistics.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RRCW"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint."""


@dataclass
class Checkpoint:
    spec: dict
    blocks: list  # [(name, weight array, bias array or None)]
    meta: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.spec["arch"]

    @property
    def param_count(self) -> int:
        return sum(w.size + (0 if b is None else b.size) for _, w, b in self.blocks)

    @classmethod
    def from_network(cls, net, meta=None) -> "Checkpoint":
        blocks = [(name, p.w.copy(), None if p.b is None else p.b.copy())
                  for name, p in net.named_params()]
        return cls(net.spec.to_dict(), blocks, dict(meta or {}))

    def restore(self, net):
        """Copy the stored weights into ``net`` (names and shapes must agree)."""
        params = dict(net.named_params())
        if set(params) != {n for n, _, _ in self.blocks}:
            missing = sorted(set(params) ^ {n for n, _, _ in self.blocks})
            raise CheckpointError(f"parameter names differ from the network: {missing[:5]}")
        for name, w, b in self.blocks:
            p = params[name]
            if p.w.shape != w.shape or (p.b is None) != (b is None) or (b is not None and p.b.shape != b.shape):
                raise CheckpointError(f"shape mismatch for {name}: {p.w.shape} vs {w.shape}")
            p.w[...] = w
            if b is not None:
                p.b[...] = b
        return net

    def to_network(self, dtype=np.float32):
        from .architectures import ArchSpec, build

        net = build(ArchSpec.from_dict(self.spec), dtype=dtype)
        return self.restore(net)

    # ---------------------------------------------------------- bytes

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<H", VERSION)
        arch = self.arch.encode("ascii")
        out += struct.pack("<H", len(arch)) + arch
        meta = json.dumps({"spec": self.spec, "meta": self.meta}, sort_keys=True).encode("utf-8")
        out += struct.pack("<I", len(meta)) + meta
        out += struct.pack("<I", len(self.blocks))
        for name, w, b in self.blocks:
            nb = name.encode("utf-8")
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<B", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape)
            out += np.ascontiguousarray(w, dtype="<f4").tobytes()
            if b is None:
                out += b"\x00"
            else:
                out += b"\x01" + struct.pack("<I", b.size) + np.ascontiguousarray(b, dtype="<f4").tobytes()
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 10 or data[:4] != MAGIC:
            raise CheckpointError("not an RRCW checkpoint (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checksum mismatch (corrupted or truncated checkpoint)")
        r = _Reader(body, 4)
        (version,) = r.unpack("<H")
        if version != VERSION:
            raise CheckpointError(f"unsupported RRCW version {version}")
        arch = r.take(r.unpack("<H")[0]).decode("ascii")
        doc = json.loads(r.take(r.unpack("<I")[0]).decode("utf-8"))
        if doc["spec"].get("arch") != arch:
            raise CheckpointError("architecture id in header and metadata disagree")
        blocks = []
        for _ in range(r.unpack("<I")[0]):
            name = r.take(r.unpack("<H")[0]).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            w = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape).astype(np.float32)
            b = None
            if r.unpack("<B")[0]:
                (nb,) = r.unpack("<I")
                b = np.frombuffer(r.take(4 * nb), dtype="<f4").astype(np.float32)
            blocks.append((name, w, b))
        if r.pos != len(body):
            raise CheckpointError("trailing bytes after the last block")
        return cls(doc["spec"], blocks, doc.get("meta", {}))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, buf, pos=0):
        self.buf, self.pos = buf, pos

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_network(net, path, meta=None):
    Checkpoint.from_network(net, meta).save(path)


def load_network(path, dtype=np.float32):
    ckpt = Checkpoint.load(path)
    return ckpt.to_network(dtype), ckpt
