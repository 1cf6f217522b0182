"""Binary checkpoint envelope shared by the GNN and the baselines.

Layout (all little-endian)::

    magic        8 bytes (GNNCKPT1 | MLPBASE1 | LINREG01 | RMEAN001)
    header       5 x u32 config fields, then 1 x f64
    params       u32 count, then per tensor:
                 u32 name length, name (utf-8), u32 rank, rank x u32 dims, f64 data
    state        same layout as params (optimizer moments, counters, norm stats)

The meaning of the header fields depends on the magic; for ``GNNCKPT1`` they
are ``(d_v, d_e, hidden, sage_layers, seq_len)`` and the dropout rate.
Tensors are written in insertion order, so identical inputs give identical
bytes.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGICS = {"gnn": b"GNNCKPT1", "mlp": b"MLPBASE1", "linear": b"LINREG01", "rolling_mean": b"RMEAN001"}
KIND_OF = {v: k for k, v in MAGICS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    magic: bytes
    header: tuple[int, int, int, int, int]
    scalar: float
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return KIND_OF[self.magic]


def _pack_section(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() below is C-order regardless
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.magic not in KIND_OF:
        raise CheckpointError(f"unknown magic {ckpt.magic!r}")
    head = ckpt.magic + struct.pack("<5Id", *ckpt.header, float(ckpt.scalar))
    return head + _pack_section(ckpt.params) + _pack_section(ckpt.state)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def from_bytes(buf: bytes, expect: bytes | None = None) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(8)
    if magic not in KIND_OF:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if expect is not None and magic != expect:
        raise CheckpointError(f"expected {expect.decode()} checkpoint, found {magic.decode()}")
    *header, scalar = r.unpack("<5Id")
    params = r.section()
    state = r.section()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(magic, tuple(header), scalar, params, state)


def save(path, ckpt: Checkpoint) -> None:
    """Write atomically so an interrupted save never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path, expect: bytes | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expect)
