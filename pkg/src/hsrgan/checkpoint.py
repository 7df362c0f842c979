"""Single-file tensor container: JSON index + raw little-endian payloads.

Layout: an 8-byte little-endian length, the UTF-8 JSON index, then the
concatenated payload bytes. The index records format_version, free-form
metadata, and for every named array its dtype, shape, and byte offset into
the payload region. Parameters are stored as float32; counters and RNG
states use int64/uint8 and declare so in the index.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArchiveError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


def save_container(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write named numpy arrays plus metadata; names are sorted for stable bytes."""
    path = Path(path)
    index = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": {}}
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        arr = arr.astype(_DTYPES[arr.dtype.name])  # force little-endian
        index["tensors"][name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(payload),
        }
        payload.extend(arr.tobytes())
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))
    tmp.replace(path)
    return path


def load_container(path) -> tuple[dict, dict]:
    """Read a container; returns (arrays, meta)."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            if blob_len > size - 8:
                raise ArchiveError(f"corrupt container {path}: index length {blob_len} "
                                   f"exceeds file size {size}")
            index = json.loads(fh.read(blob_len).decode("utf-8"))
            payload = fh.read()
    except (OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"cannot read container {path}: {exc}") from exc
    if index.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported container format_version {index.get('format_version')!r}")
    arrays = {}
    for name, entry in index["tensors"].items():
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        raw = payload[start : start + count * dtype.itemsize]
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, index["meta"]
