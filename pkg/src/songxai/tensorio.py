"""Binary container for named float32 arrays.

Layout: magic ``BWXA``, u16 version, u32 header length, UTF-8 JSON header,
then the little-endian float32 blobs back to back. The header carries a
``tensors`` directory (name, shape, byte offset into the blob area, byte
length) next to any caller metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"BWXA"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def dumps(tensors: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header or {})
    head["tensors"] = directory
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head_bytes)) + head_bytes + b"".join(blobs)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise DataError("tensor file truncated before header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"unsupported tensor file version {version} (this build reads version {VERSION})")
    start = _PREFIX.size + head_len
    if len(data) < start:
        raise DataError("tensor file truncated inside header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt header: {exc}") from None
    tensors = {}
    blob_area = len(data) - start
    for entry in header.get("tensors", []):
        shape = tuple(int(d) for d in entry["shape"])
        off, length = int(entry["offset"]), int(entry["length"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"tensor {entry['name']!r}: length {length} does not match shape {shape}")
        if off < 0 or off + length > blob_area:
            raise DataError(f"tensor {entry['name']!r} extends past end of file (truncated?)")
        arr = np.frombuffer(data, dtype="<f4", count=length // 4, offset=start + off)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(shape)
    return header, tensors


def save(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        return loads(data)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
