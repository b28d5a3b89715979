"""Little-endian binary checkpoint.

Layout::

    8 bytes   magic b"D2AUCKPT"
    u32       format version
    u32 + N   UTF-8 header: ``key = value`` lines (config echo, epoch, rng seed, conventions)
    u32 + N   UTF-8 metric history (CSV)
    u32       tensor count
    per tensor, sorted by name:
      u16 + N name, u8 dtype code, u8 ndim, u32 * ndim dims, raw element bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"D2AUCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


class CheckpointError(Exception):
    pass


def _text(raw: bytes) -> str:
    try:
        return raw.decode()
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"checkpoint text block is not UTF-8: {exc}") from None


@dataclass
class Checkpoint:
    header: dict[str, str] = field(default_factory=dict)
    history: str = ""
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        head = "".join(f"{k} = {v}\n" for k, v in self.header.items()).encode()
        out += struct.pack("<I", len(head)) + head
        hist = self.history.encode()
        out += struct.pack("<I", len(hist)) + hist
        out += struct.pack("<I", len(self.tensors))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode()
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<BB", code, arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 8

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise CheckpointError("truncated checkpoint")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        def take_bytes(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError("truncated checkpoint")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = {}
        for line in _text(take_bytes(take("<I")[0])).splitlines():
            if " = " not in line:
                raise CheckpointError(f"malformed header line {line!r}")
            k, v = line.split(" = ", 1)
            header[k] = v
        history = _text(take_bytes(take("<I")[0]))
        tensors = {}
        (count,) = take("<I")
        for _ in range(count):
            name = _text(take_bytes(take("<H")[0]))
            code, ndim = take("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = take(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take_bytes(n * dt.itemsize), dtype=dt).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last tensor")
        return cls(header, history, tensors)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
