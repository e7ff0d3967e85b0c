"""Binary checkpoint format.

Layout (little-endian)::

    b"RACS" | version u8
    n u32 | m_max u32 | k_min u32 | stage u8
    meta_len u32 | meta (UTF-8 JSON: config echo, model spec, RNG state)
    tensor_count u32
    per tensor: name_len u16 | name | ndim u8 | dims u32 * ndim
    payload: float32 row-major, tensors in table order
    crc32 u32 over everything above
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"RACS"
VERSION = 1
PHI_NAME = "phi"


@dataclass
class Checkpoint:
    phi: np.ndarray
    k_min: int
    theta: dict[str, np.ndarray]
    stage: int = 3
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    version: int = VERSION

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.float32)
        self.theta = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.theta.items()}

    @property
    def n(self):
        return self.phi.shape[1]

    @property
    def m_max(self):
        return self.phi.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.version == other.version
            and self.k_min == other.k_min
            and self.stage == other.stage
            and self.config == other.config
            and self.rng_state == other.rng_state
            and _bitwise_equal(self.phi, other.phi)
            and list(self.theta) == list(other.theta)
            and all(_bitwise_equal(self.theta[k], other.theta[k]) for k in self.theta)
        )


def _bitwise_equal(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config, "rng_state": ckpt.rng_state}, sort_keys=True).encode()
    tensors = [(PHI_NAME, ckpt.phi)] + list(ckpt.theta.items())
    parts = [MAGIC, struct.pack("<B", ckpt.version),
             struct.pack("<IIIB", ckpt.n, ckpt.m_max, ckpt.k_min, ckpt.stage),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in tensors:
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < 9:
        raise FormatError("checkpoint truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    rd = _Reader(body)
    rd.take(4)
    (version,) = rd.unpack("<B")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch (corrupt or truncated)")
    n, m_max, k_min, stage = rd.unpack("<IIIB")
    (meta_len,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("unreadable checkpoint metadata") from exc
    (count,) = rd.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode()
        (ndim,) = rd.unpack("<B")
        table.append((name, rd.unpack(f"<{ndim}I") if ndim else ()))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(rd.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if rd.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    phi = arrays.pop(PHI_NAME, None)
    if phi is None or phi.shape != (m_max, n):
        raise FormatError("checkpoint header and measurement matrix disagree")
    return Checkpoint(phi, k_min, arrays, stage, meta.get("config", {}), meta.get("rng_state"), version)


def checkpoint_save(path, ckpt: Checkpoint):
    data = encode(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
