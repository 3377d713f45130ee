"""The SPCV container: T structured frames plus the normalization they were fitted in.

On-disk layout (little-endian)::

    b"SPCV"  u32 version=1  u32 T  u32 U  u32 V  f64 center[3]  f64 scale
    T·U·V·3 f32, row-major frames, xyz interleaved
    [optional] b"META" u32 n  n bytes of UTF-8 JSON (list of per-frame dicts)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import InvalidInputError, NormalizationTransform

MAGIC = b"SPCV"
META_MAGIC = b"META"
VERSION = 1
HEADER = struct.Struct("<4sIIII4d")


class ContainerFormatError(ValueError):
    pass


class BadMagicError(ContainerFormatError):
    pass


class VersionMismatchError(ContainerFormatError):
    pass


class TruncatedPayloadError(ContainerFormatError):
    pass


@dataclass
class SpcvContainer:
    frames: np.ndarray  # (T, U, V, 3), normalized units
    transform: NormalizationTransform = field(default_factory=lambda: NormalizationTransform((0.0, 0.0, 0.0), 1.0))
    metadata: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise InvalidInputError(f"frames must be T×U×V×3, got {self.frames.shape}")
        if self.metadata and len(self.metadata) != self.frames.shape[0]:
            raise InvalidInputError("metadata must have one entry per frame")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def U(self) -> int:
        return self.frames.shape[1]

    @property
    def V(self) -> int:
        return self.frames.shape[2]

    def point_cloud(self, t: int, denormalize: bool = False) -> np.ndarray:
        pts = self.frames[t].reshape(-1, 3)
        return self.transform.invert(pts) if denormalize else pts.copy()

    def equals(self, other: "SpcvContainer") -> bool:
        return (self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames)
                and self.transform == other.transform
                and self.metadata == other.metadata)


def header_size() -> int:
    return HEADER.size


def to_bytes(c: SpcvContainer) -> bytes:
    tf = c.transform
    head = HEADER.pack(MAGIC, VERSION, c.T, c.U, c.V, *tf.center, tf.scale)
    payload = np.ascontiguousarray(c.frames, dtype="<f4").tobytes()
    out = head + payload
    if c.metadata:
        meta = json.dumps(c.metadata, sort_keys=True, separators=(",", ":")).encode()
        out += META_MAGIC + struct.pack("<I", len(meta)) + meta
    return out


def from_bytes(data: bytes) -> SpcvContainer:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedPayloadError(f"header truncated: {len(data)} < {HEADER.size} bytes")
    _, version, t, u, v, cx, cy, cz, scale = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    n = t * u * v * 3 * 4
    end = HEADER.size + n
    if len(data) < end:
        raise TruncatedPayloadError(f"payload truncated: need {n} bytes, have {len(data) - HEADER.size}")
    frames = np.frombuffer(data, dtype="<f4", count=t * u * v * 3, offset=HEADER.size)
    frames = frames.reshape(t, u, v, 3).astype(np.float64)
    meta: list[dict] = []
    rest = data[end:]
    if rest:
        if rest[:4] != META_MAGIC or len(rest) < 8:
            raise ContainerFormatError("trailing bytes after payload are not a metadata block")
        (mlen,) = struct.unpack_from("<I", rest, 4)
        if len(rest) != 8 + mlen:
            raise TruncatedPayloadError(f"metadata block length {mlen} does not match {len(rest) - 8} bytes")
        meta = json.loads(rest[8:].decode())
    if not scale > 0:
        raise ContainerFormatError(f"invalid normalization scale {scale}")
    return SpcvContainer(frames, NormalizationTransform((cx, cy, cz), scale), meta)


def write_spcv(container: SpcvContainer, path) -> None:
    Path(path).write_bytes(to_bytes(container))


def read_spcv(path) -> SpcvContainer:
    return from_bytes(Path(path).read_bytes())
