"""Versioned single-precision tensor archive.

Byte layout (all integers little-endian):

    magic        8 bytes   b"IMTEDCK\\0"
    version      u32
    count        u32
    table        count entries of
                   name_len u32, name (utf-8), ndim u32, dims u64 * ndim,
                   offset u64 (relative to payload start), nbytes u64
    payload      concatenated float32 little-endian tensors, in table order
"""
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"IMTEDCK\0"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class CheckpointArchive:
    """Ordered name -> float32 array mapping with the on-disk invariants enforced."""

    def __init__(self, tensors=None, version=VERSION):
        self.version = version
        self._tensors = OrderedDict()
        for name, value in (tensors.items() if isinstance(tensors, dict) else tensors or ()):
            self.add(name, value)

    def add(self, name, value):
        if name in self._tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        data = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        self._tensors[name] = np.array(data, dtype=_F32, order="C")  # keeps 0-d shapes

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def shape(self, name):
        return self._tensors[name].shape

    def to_bytes(self):
        table, payload, offset = [], [], 0
        for name, arr in self._tensors.items():
            raw = arr.tobytes()
            enc = name.encode("utf-8")
            entry = struct.pack("<I", len(enc)) + enc + struct.pack("<I", arr.ndim)
            entry += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<QQ", offset, len(raw))
            table.append(entry)
            payload.append(raw)
            offset += len(raw)
        head = MAGIC + struct.pack("<II", self.version, len(self._tensors))
        return head + b"".join(table) + b"".join(payload)

    @classmethod
    def from_bytes(cls, buf):
        buf = memoryview(buf)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"truncated header while reading {what}")
            out = bytes(buf[pos:pos + n])
            pos += n
            return out

        if take(len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("not a checkpoint archive (bad magic)")
        version, count = struct.unpack("<II", take(8, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        entries = []
        for i in range(count):
            (n,) = struct.unpack("<I", take(4, f"entry {i} name length"))
            name = take(n, f"entry {i} name").decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4, f"{name} ndim"))
            dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} shape"))
            offset, nbytes = struct.unpack("<QQ", take(16, f"{name} offset"))
            expect = 4 * int(np.prod(dims, dtype=np.int64))
            if nbytes != expect:
                raise CheckpointError(f"tensor {name!r}: payload length {nbytes} != 4 * prod{tuple(dims)}")
            entries.append((name, tuple(dims), offset, nbytes))
        base = pos
        arch = cls()
        for name, dims, offset, nbytes in entries:
            start = base + offset
            if start + nbytes > len(buf):
                raise CheckpointError(f"tensor {name!r}: payload truncated "
                                      f"({max(0, len(buf) - start)} of {nbytes} bytes present)")
            arr = np.frombuffer(buf[start:start + nbytes], dtype=_F32).reshape(dims).copy()
            arch.add(name, arr)
        return arch


def save_checkpoint(params, path):
    """Write named tensors (dict, Module.named_parameters() pairs, or an archive) to ``path``."""
    arch = params if isinstance(params, CheckpointArchive) else CheckpointArchive(
        params if isinstance(params, dict) else list(params))
    with open(path, "wb") as fh:
        fh.write(arch.to_bytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return CheckpointArchive.from_bytes(fh.read())
