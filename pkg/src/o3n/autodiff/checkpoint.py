"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"O3NC" | u32 version=1 | u32 count
    count x ( u16 name_len | name | u8 ndims | u32 dims... | float32 payload )
    u32 meta_len | UTF-8 "key=value" lines
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import IoError, MalformedContainer
from .tensor import ParamSet, Tensor

CKPT_MAGIC = b"O3NC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)

    def params(self) -> ParamSet:
        return ParamSet((k, Tensor(np.array(v, dtype=np.float32), requires_grad=True)) for k, v in self.tensors.items())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    meta = "".join(f"{k}={v}\n" for k, v in ckpt.metadata.items()).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source="<bytes>") -> Checkpoint:
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise MalformedContainer(f"{source}: truncated checkpoint")
        return struct.unpack_from(fmt, blob, pos), pos + size

    (magic, version, count), pos = take("<4sII", 0)
    if magic != CKPT_MAGIC:
        raise MalformedContainer(f"{source}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise MalformedContainer(f"{source}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,), pos = take("<H", pos)
        if pos + nlen > len(blob):
            raise MalformedContainer(f"{source}: truncated tensor name")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndims,), pos = take("<B", pos)
        dims, pos = take(f"<{ndims}I", pos)
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise MalformedContainer(f"{source}: truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    (mlen,), pos = take("<I", pos)
    if pos + mlen != len(blob):
        raise MalformedContainer(f"{source}: metadata length mismatch")
    metadata = {}
    for line in blob[pos:].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    return Checkpoint(tensors, metadata)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_checkpoint(ckpt))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, source=str(path))
