"""SPGW weight files.

Layout (all integers little-endian)::

    b"SPGW" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype | u8 rank | u32 dims[rank] | data

dtype 0 is float32; dtype 1 (float64) is written only for models built in
64-bit gradient-check mode.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .._errors import ConfigError, DataError

MAGIC = b"SPGW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(weights: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataError("truncated SPGW file")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise DataError("not an SPGW file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DataError(f"unsupported SPGW version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise DataError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = data.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise DataError("trailing bytes after last SPGW tensor")
    return out


def save_weights(model, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model.weights))
    return path


def read_weights(path) -> dict:
    return loads(Path(path).read_bytes())


def load_weights(path, model, *, exclude=(), strict=True):
    """Load an SPGW file into ``model`` and return it.

    Names starting with any prefix in ``exclude`` are skipped (e.g.
    ``("classifier.",)`` to keep a freshly initialized head). With ``strict``
    every non-excluded model weight must be present with an identical shape.
    """
    stored = read_weights(path)
    exclude = tuple(exclude)
    wanted = {k: v for k, v in model.weights.items() if not k.startswith(exclude)}
    values = {k: v for k, v in stored.items() if not k.startswith(exclude)}
    if strict:
        missing = sorted(set(wanted) - set(values))
        if missing:
            raise ConfigError(f"{path}: missing weights for {missing[:3]}")
        extra = sorted(set(values) - set(wanted))
        if extra:
            raise ConfigError(f"{path}: weights not in model: {extra[:3]}")
    for name, arr in values.items():
        if name in wanted and wanted[name].shape != arr.shape:
            raise ConfigError(
                f"{path}: {name} has shape {arr.shape}, model expects {wanted[name].shape}"
            )
    model.set_weights({k: v for k, v in values.items() if k in wanted}, strict=False)
    return model
