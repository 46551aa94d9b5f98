"""Bit-exact tensor checkpoint files.

Layout (all integers little-endian)::

    b"CGN1" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype | u8 rank | rank x u32 dims | payload
    u64 FNV-1a-64 of every preceding byte

dtype 0 is float32, 1 is float64. Training state and the network
configuration travel as tensors under the reserved prefixes below.
"""

import os
import struct
from dataclasses import fields

import numpy as np

from ._jit import JIT_ENABLED, njit
from .errors import CheckpointError
from .model import NetworkConfig

MAGIC = b"CGN1"
VERSION = 1
STATE_PREFIX = "__state__."
ADAM_M_PREFIX = "__adam_m__."
ADAM_V_PREFIX = "__adam_v__."
CONFIG_PREFIX = "__config__."

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


@njit(cache=True)
def _fnv_nb(arr):
    h = np.uint64(_FNV_OFFSET)
    prime = np.uint64(_FNV_PRIME)
    for k in range(arr.shape[0]):
        h = (h ^ np.uint64(arr[k])) * prime
    return h


def _fnv_py(arr):
    h = _FNV_OFFSET
    for b in arr.tobytes():
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a64(data):
    arr = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv_nb(arr)) if JIT_ENABLED else _fnv_py(arr)


def encode(tensors):
    """Serialise an ordered ``name -> array`` mapping to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 4:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} exceeds 4")
        if any(d >= 2 ** 32 for d in arr.shape):
            raise CheckpointError(f"tensor {name!r}: dimension overflows u32")
        raw = name.encode("utf-8")
        if len(raw) >= 2 ** 16:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(data):
    if len(data) < 20:
        raise CheckpointError(f"truncated checkpoint: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} at offset 0")
    body, footer = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", footer)
    if fnv1a64(body) != stored:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    pos = 12
    out = {}

    def need(n, what):
        if pos + n > len(body):
            raise CheckpointError(f"truncated {what} at offset {pos}")

    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(nlen + 2, "tensor header")
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code} at offset {pos - 2}")
        if rank > 4:
            raise CheckpointError(f"tensor {name!r}: rank {rank} exceeds 4 at offset {pos - 1}")
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        nbytes = dt.itemsize
        for d in dims:
            nbytes *= d
        if nbytes > len(body) - pos:
            raise CheckpointError(f"tensor {name!r}: dims {dims} overflow the file at offset {pos}")
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}")
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes at offset {pos}")
    return out


def write_tensors(path, tensors):
    data = encode(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_tensors(path):
    with open(path, "rb") as f:
        return decode(f.read())


def config_tensors(cfg):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, str):
            # enums are stored as their string's UTF-8 code points
            v = [ord(ch) for ch in v]
        out[CONFIG_PREFIX + f.name] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return out


def config_from_tensors(tensors):
    kw = {}
    for f in fields(NetworkConfig):
        key = CONFIG_PREFIX + f.name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks network setting {f.name!r}")
        v = tensors[key]
        default = f.default
        if isinstance(default, str):
            kw[f.name] = "".join(chr(int(c)) for c in v)
        elif isinstance(default, bool):
            kw[f.name] = bool(v[0])
        elif isinstance(default, tuple):
            kw[f.name] = tuple(int(c) for c in v)
        else:
            kw[f.name] = int(v[0])
    return NetworkConfig(**kw)


def save_checkpoint(path, model, state=None):
    """Write model tensors, network config and optional extra state tensors."""
    tensors = dict(model.store.tensors())
    tensors.update(config_tensors(model.cfg))
    if state:
        tensors.update(state)
    write_tensors(path, tensors)


def load_checkpoint(path):
    """Returns ``(config, tensors)``; restore with :func:`restore_model`."""
    tensors = read_tensors(path)
    return config_from_tensors(tensors), tensors


def restore_model(model, tensors):
    try:
        model.store.load_tensors(tensors)
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e.args[0]!r}") from None
