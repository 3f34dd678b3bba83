"""Versioned little-endian binary formats for landmark shots and clips.

Both end with a CRC32 (zlib polynomial) over every preceding byte.

    LMK1 | u32 F | F*68*2 f32 | u32 crc
    CLP1 | u32 C | u32 T | u32 H | u32 W | C*T*H*W f32 | u32 crc
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

LMK_MAGIC = b"LMK1"
CLP_MAGIC = b"CLP1"


class StorageError(Exception):
    """Base class for on-disk format problems."""


class FormatError(StorageError):
    pass


class ChecksumError(StorageError):
    pass


class TruncatedError(StorageError):
    pass


def seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unseal(buf: bytes, what: str) -> bytes:
    """Check the trailing CRC and return the body."""
    if len(buf) < 4:
        raise TruncatedError(f"{what}: too short for a checksum")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{what}: CRC32 mismatch")
    return body


def _check_size(buf: bytes, expected: int, what: str) -> None:
    if len(buf) < expected:
        raise TruncatedError(f"{what}: header declares {expected} bytes, file has {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{what}: {len(buf) - expected} unexpected trailing bytes")


def _check_magic(buf: bytes, magic: bytes, what: str) -> None:
    if len(buf) < len(magic):
        raise TruncatedError(f"{what}: shorter than its magic")
    if buf[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")


def encode_landmarks(coords: np.ndarray) -> bytes:
    c = np.asarray(coords)
    if c.ndim != 3 or c.shape[1:] != (68, 2):
        raise ValueError(f"landmarks must be [F, 68, 2], got {c.shape}")
    payload = np.ascontiguousarray(c, dtype="<f4").tobytes()
    return seal(LMK_MAGIC + struct.pack("<I", c.shape[0]) + payload)


def decode_landmarks(buf: bytes, what: str = "landmark file") -> np.ndarray:
    _check_magic(buf, LMK_MAGIC, what)
    if len(buf) < 8:
        raise TruncatedError(f"{what}: header cut short")
    (F,) = struct.unpack("<I", buf[4:8])
    _check_size(buf, 8 + F * 68 * 2 * 4 + 4, what)
    body = unseal(buf, what)
    return np.frombuffer(body, dtype="<f4", offset=8).reshape(F, 68, 2).copy()


def encode_clip(clip: np.ndarray) -> bytes:
    c = np.asarray(clip)
    if c.ndim != 4:
        raise ValueError(f"clip must be [C, T, H, W], got {c.shape}")
    payload = np.ascontiguousarray(c, dtype="<f4").tobytes()
    return seal(CLP_MAGIC + struct.pack("<4I", *c.shape) + payload)


def decode_clip(buf: bytes, what: str = "clip file") -> np.ndarray:
    _check_magic(buf, CLP_MAGIC, what)
    if len(buf) < 20:
        raise TruncatedError(f"{what}: header cut short")
    shape = struct.unpack("<4I", buf[4:20])
    _check_size(buf, 20 + int(np.prod(shape)) * 4 + 4, what)
    body = unseal(buf, what)
    return np.frombuffer(body, dtype="<f4", offset=20).reshape(shape).copy()


def save_landmarks(path: str | Path, coords: np.ndarray) -> None:
    Path(path).write_bytes(encode_landmarks(coords))


def load_landmarks(path: str | Path) -> np.ndarray:
    return decode_landmarks(Path(path).read_bytes(), str(path))


def save_clip(path: str | Path, clip: np.ndarray) -> None:
    Path(path).write_bytes(encode_clip(clip))


def load_clip(path: str | Path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes(), str(path))
