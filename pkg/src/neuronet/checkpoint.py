"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"NNCKPT1"
    u32 length, canonical ModelConfig JSON (UTF-8)
    u32 entry count
    per entry, sorted by name:
        u32 name length, name (UTF-8), u8 dtype code, u32 rank, u32 extents...,
        values
    u64 checksum: blake2b (8-byte digest) of every preceding byte

Batch-norm running statistics are stored as ``<layer>.running_mean`` and
``<layer>.running_var`` entries.
"""
import hashlib
import json
import os
import struct

import numpy as np

from .errors import FormatError
from .graph import ModelConfig, build_model
from .tensor import RunningStats, Tensor

MAGIC = b"NNCKPT1"
DTYPE_CODES = {np.dtype("u1"): 0, np.dtype("<i2"): 1, np.dtype("<f4"): 2, np.dtype("<f8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_RUNNING = (".running_mean", ".running_var")


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def _entries(params):
    entries = {name: t.data for name, t in params.tensors.items()}
    for name, stats in params.running.items():
        entries[name + ".running_mean"] = stats.mean
        entries[name + ".running_var"] = stats.var
    return entries


def to_bytes(params):
    parts = [MAGIC]
    cfg = params.config.canonical_json().encode()
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    entries = _entries(params)
    parts.append(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise FormatError(f"cannot serialise {name}: dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = b"".join(parts)
    return payload + _checksum(payload)


def save_checkpoint(params, path):
    """Write atomically (temp file + rename)."""
    data = to_bytes(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def from_bytes(buf):
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic (expected NNCKPT1)")
    payload, stored = buf[:-8], buf[-8:]
    if _checksum(payload) != stored:
        raise FormatError("checkpoint checksum mismatch")
    r = _Reader(payload)
    r.take(len(MAGIC), "magic")
    (n_cfg,) = r.unpack("<I", "config length")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(n_cfg, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint config: {exc}") from exc
    (count,) = r.unpack("<I", "entry count")
    entries = {}
    for _ in range(count):
        (n_name,) = r.unpack("<I", "name length")
        name = r.take(n_name, "name").decode()
        code, rank = r.unpack("<BI", f"{name} header")
        if code not in CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"{name} extents")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(r.take(nbytes, f"{name} values"), dtype=dt).reshape(shape)
    if r.pos != len(payload):
        raise FormatError("trailing bytes after checkpoint entries")

    dtype = next(v.dtype for k, v in entries.items() if not k.endswith(_RUNNING))
    params = build_model(config, dtype=dtype.newbyteorder("="))
    expected = set(_entries(params))
    if set(entries) != expected:
        missing = sorted(expected - set(entries))
        extra = sorted(set(entries) - expected)
        raise FormatError(f"checkpoint entries do not match config (missing {missing[:3]}, extra {extra[:3]})")
    tensors = {}
    for name, t in params.tensors.items():
        arr = entries[name]
        if arr.shape != t.shape:
            raise FormatError(f"{name}: shape {arr.shape} != expected {t.shape}")
        tensors[name] = Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype.newbyteorder("="))
    running = {}
    for name, stats in params.running.items():
        rs = RunningStats(stats.mean.shape[0], dtype=stats.mean.dtype)
        rs.mean = entries[name + ".running_mean"].astype(rs.mean.dtype)
        rs.var = entries[name + ".running_var"].astype(rs.var.dtype)
        running[name] = rs
    params.tensors = tensors
    params.running = running
    return params


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
