"""Binary checkpoint container.

Layout (little-endian): magic ``CSTW``, version u16, 32-byte config digest,
u32 length + UTF-8 ``key=value`` metadata block, u32 record count, then per
record: u16 name length, name, u8 ndim, ndim x u32 dims, float64 payload.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSTW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(config_digest: bytes, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    if len(config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), config_digest, struct.pack("<I", len(text)), text,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[bytes, dict[str, str], dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 6
    digest = data[off:off + 32]
    off += 32
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = {}
    for line in data[off:off + n].decode().splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return digest, meta, tensors


def save(path, config_digest, meta, tensors) -> str:
    data = encode(config_digest, meta, tensors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    return decode(Path(path).read_bytes())


def rng_to_tensor(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as eight exact 32-bit words stored in doubles."""
    st = rng.bit_generator.state
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words += [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    return np.array(words + [st["has_uint32"], st["uinteger"]], dtype=float)


def rng_from_tensor(t: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in t]
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                "has_uint32": w[8], "uinteger": w[9]}
    return np.random.Generator(bg)
