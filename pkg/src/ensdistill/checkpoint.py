"""KDC1 checkpoint container.

Little-endian layout:

    magic "KDC1" | u32 format version | 32-byte config hash
    | parameter table | optimizer-state table | u64 checksum

Each table is a u32 entry count followed by entries of
``u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | float32
payload``. The trailing checksum is the first 8 bytes of the SHA-256 digest
of all preceding bytes, interpreted as a little-endian u64, so any bit flip
in the file is detected before anything is loaded.

Payloads are 32-bit reals: training runs in float32, so parameters and
velocity buffers round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

MAGIC = b"KDC1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupted or incompatible checkpoint file."""


class ChecksumError(CheckpointError):
    """Trailing checksum does not match the file contents."""


class VersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name}: rank {arr.ndim} exceeds format limit")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated file")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def table(self) -> dict[str, np.ndarray]:
        count = self.u32()
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = self.take(self.u16()).decode("utf-8")
            rank = self.u8()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape)
            out[name] = payload.copy()
        return out


def _checksum(body: bytes) -> int:
    return struct.unpack("<Q", hashlib.sha256(body).digest()[:8])[0]


def save_checkpoint(path, params: dict[str, np.ndarray], state: dict[str, np.ndarray],
                    config_hash: bytes) -> None:
    """Write parameters plus optimizer-state entries under ``config_hash``."""
    if len(config_hash) != 32:
        raise CheckpointError(f"config hash must be 32 bytes, got {len(config_hash)}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(config_hash)
    _write_table(buf, params)
    _write_table(buf, state)
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _checksum(body)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], bytes]:
    """Read and verify a KDC1 file; returns (params, optimizer state, config hash)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 32 + 8:
        raise CheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    body, tail = raw[:-8], raw[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(body):
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    reader = _Reader(body, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a KDC1 checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    config_hash = reader.take(32)
    params = reader.table()
    state = reader.table()
    if reader.offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - reader.offset} trailing bytes after tables")
    return params, state, config_hash


def assign_parameters(registry, payload: dict[str, np.ndarray], path="<checkpoint>") -> None:
    """Load payload arrays into a model's parameter registry in place.

    Names and shapes must match the registry exactly; anything else means the
    checkpoint belongs to a different configuration.
    """
    names = set(registry)
    saved = set(payload)
    if names != saved:
        missing = sorted(names - saved)[:5]
        extra = sorted(saved - names)[:5]
        raise CheckpointError(
            f"{path}: parameter names do not match current model "
            f"(missing {missing!r}, unexpected {extra!r})")
    for name, tensor in registry.items():
        arr = payload[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {arr.shape}, model expects {tensor.data.shape}")
        tensor.data[...] = arr.astype(tensor.data.dtype)
