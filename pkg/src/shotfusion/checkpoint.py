"""CKP1 checkpoint files.

Layout (little-endian), followed by a CRC32 of everything before it:

    "CKP1" | u32 version
    json   config snapshot (model + training)
    tensors  parameters
    tensors  batch-norm running statistics
    json   optimizer hyperparameters and step
    tensors  Adam first moments
    tensors  Adam second moments
    json   RNG state, epoch, history

``json`` is u32 length + UTF-8 (sorted keys).  ``tensors`` is u32 count and per
tensor: u16 name length, name, u8 dtype tag, u8 ndim, ndim x u32 extents,
raw little-endian payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.formats import ChecksumError, FormatError, StorageError, TruncatedError, seal, unseal  # noqa: F401

MAGIC = b"CKP1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw


def _tensors(d: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(d))]
    for name in d:
        arr = np.asarray(d[name])
        if arr.dtype not in TAG_OF:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        tag = TAG_OF[arr.dtype]
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def encode(ck: Checkpoint) -> bytes:
    body = (MAGIC + struct.pack("<I", VERSION) + _json(ck.config) + _tensors(ck.params)
            + _tensors(ck.buffers) + _json(ck.optim) + _tensors(ck.adam_m) + _tensors(ck.adam_v)
            + _json(ck.meta))
    return seal(body)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: ends inside a record")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.what}: bad JSON section ({exc})") from None

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (klen,) = self.unpack("<H")
            try:
                name = self.take(klen).decode()
            except UnicodeDecodeError:
                raise FormatError(f"{self.what}: tensor name is not UTF-8") from None
            tag, ndim = self.unpack("<BB")
            if tag not in DTYPE_TAGS:
                raise FormatError(f"{self.what}: unknown dtype tag {tag} for {name}")
            shape = self.unpack(f"<{ndim}I")
            dt = DTYPE_TAGS[tag]
            n = int(np.prod(shape)) * dt.itemsize
            out[name] = np.frombuffer(self.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out


def decode(buf: bytes, what: str = "checkpoint") -> Checkpoint:
    if len(buf) < 8:
        raise TruncatedError(f"{what}: shorter than its header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{what}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    # structure first (so truncation is reported as such), then the checksum
    r = _Reader(buf[:-4] if len(buf) >= 12 else buf, what)
    r.pos = 8
    ck = Checkpoint(r.json(), r.tensors(), r.tensors(), r.json(), r.tensors(), r.tensors(), r.json())
    if r.pos != len(r.buf):
        raise FormatError(f"{what}: {len(r.buf) - r.pos} unexpected trailing bytes")
    unseal(buf, what)
    return ck


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
