"""Length-prefixed binary checkpoints.

Layout (all integers little-endian)::

    b"VCKP"  u32 version
    u64 header length, header bytes (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
                prod(dims) x f64 values

Values are raw IEEE doubles, so a save/load round trip is bit-exact.
"""
import io
import json
import struct

import numpy as np

MAGIC = b"VCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(header, tensors):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(blob):
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<Q", "header length")
    header = json.loads(r.take(hlen, "header").decode())
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode()
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return header, tensors


def save_checkpoint(path, header, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(header, tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
