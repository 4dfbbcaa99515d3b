"""Binary checkpoint format for EncoderParams.

Layout (all integers little-endian)::

    b"MADAPT1"                 7 bytes
    config digest              64 ASCII hex chars (sha256 of the ModelConfig)
    array count                uint32
    per array:
        name length            uint32
        name                   utf-8 bytes, ``group/name``
        rank                   uint32
        dims                   rank x uint64
        payload                prod(dims) x float64
"""

from __future__ import annotations

import os
import struct

import numpy as np

from madapt.backbone import EncoderParams, ModelConfig, ParamStore
from madapt.errors import FormatError

MAGIC = b"MADAPT1"
_DIGEST_LEN = 64


def write_checkpoint(path, params: EncoderParams) -> None:
    store = params.flat()
    chunks = [MAGIC, params.config.digest().encode("ascii"), struct.pack("<I", len(store))]
    for name, arr in store.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_arrays(path) -> tuple[str, ParamStore]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    digest = r.take(_DIGEST_LEN, "config digest").decode("ascii", errors="replace")
    (count,) = r.unpack("<I", "array count")
    store = ParamStore()
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}Q", "dims")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * size, f"payload of {name}")
        store[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after last array", r.pos)
    return digest, store


def read_checkpoint(path, config: ModelConfig) -> EncoderParams:
    digest, store = read_arrays(path)
    if digest != config.digest():
        raise FormatError("checkpoint was written for a different model config", len(MAGIC))
    return EncoderParams.from_flat(config, store)
