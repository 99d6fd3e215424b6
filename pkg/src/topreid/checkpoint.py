"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"TOPRCKPT"
    version    u32
    config     u32 length + UTF-8 config text
    step       u64
    params     u32 count, then entries
    momentum   u32 count, then entries

    entry:     u16 name length, UTF-8 name, u8 dtype code (1=f4, 2=f8),
               u8 ndim, ndim x u32 dims, raw little-endian payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TOPRCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def _write_entries(fh, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        code = _dtype_code(arr)
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_entries(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    text = ckpt.config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(text)) + text)
        fh.write(struct.pack("<Q", ckpt.step))
        _write_entries(fh, ckpt.params)
        _write_entries(fh, ckpt.momentum)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = r.unpack("<I")
    text = r.take(clen).decode("utf-8")
    (step,) = r.unpack("<Q")
    params = _read_entries(r)
    momentum = _read_entries(r)
    return Checkpoint(text, step, params, momentum, version)


def restore_parameters(model, params: dict[str, np.ndarray]) -> None:
    """Load ``params`` into ``model``, failing on the first mismatched name or shape."""
    own = list(model.named_parameters())
    for name, p in own:
        if name not in params:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tuple(params[name].shape) != p.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(params[name].shape)} != model shape {p.shape}"
            )
    extra = [k for k in params if k not in dict(own)]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r}")
    for name, p in own:
        arr = params[name]
        if arr.dtype != p.dtype:
            raise CheckpointError(f"parameter {name!r}: checkpoint dtype {arr.dtype} != model dtype {p.dtype}")
        p.data = arr.copy()
