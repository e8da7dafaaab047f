"""Binary checkpoint files for TwoBranchModel.

Layout (little-endian throughout)::

    magic      8 bytes  b"WNLLCKPT"
    version    u16
    body_len   u64      bytes between the header and the checksum
    body:
        spec name          u16 length + utf-8
        seed, epoch        i64, i64
        record count       u32
        records            u16 name length + utf-8 name, u8 ndim,
                           ndim x u64 dims, float64 payload
    crc32      u32      over everything before it
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import TwoBranchModel, get_spec

MAGIC = b"WNLLCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sHQ")


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    spec_name: str
    seed: int
    epoch: int
    version: int = VERSION


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_checkpoint(model, seed=0, epoch=0, version=VERSION):
    parts = [_pack_str(model.spec.name), struct.pack("<qqI", seed, epoch, sum(1 for _ in model.named_parameters()))]
    for name, p in model.named_parameters():
        a = np.ascontiguousarray(p.data, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    blob = _HEAD.pack(MAGIC, version, len(body)) + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(model, path, seed=0, epoch=0):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, seed, epoch))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint body is malformed: record runs past the end")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_checkpoint(blob, expected_spec=None):
    """Parse checkpoint bytes into ``(model, meta)``; see the module docstring."""
    if len(blob) < _HEAD.size + 4:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes is shorter than the header")
    magic, version, body_len = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    want = _HEAD.size + body_len + 4
    if len(blob) != want:
        raise CheckpointError(f"checkpoint truncated or padded: {len(blob)} bytes, expected {want}")
    (crc,) = struct.unpack_from("<I", blob, want - 4)
    if zlib.crc32(blob[:want - 4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")

    r = _Reader(blob[_HEAD.size:want - 4])
    spec_name = r.string()
    if expected_spec is not None and expected_spec != spec_name:
        raise CheckpointError(f"checkpoint holds spec {spec_name!r} but {expected_spec!r} was requested")
    seed, epoch, count = r.unpack("<qqI")
    state = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        if name in state:
            raise CheckpointError(f"parameter {name!r} appears twice")
        state[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last record")
    try:
        model = TwoBranchModel(get_spec(spec_name), seed=0)
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match spec {spec_name!r}: {exc}") from exc
    return model, CheckpointMeta(spec_name, seed, epoch, version)


def load_checkpoint(path, expected_spec=None):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_spec)
