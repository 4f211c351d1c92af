"""Named-array checkpoint file.

Layout (all integers little-endian):
  magic "SOEK" | u32 version | u32 array count
  per array: u16 name length | UTF-8 name | u8 dtype code (0 = f32)
             | u8 ndim | u32 dims[ndim] | payload
  trailer:   u32 length | UTF-8 JSON config blob

Arrays are written in insertion order and the JSON blob canonically
(sorted keys, compact separators), so save -> load -> save is byte-identical.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SOEK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, config: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"array {name!r} must be float32, got {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path):
    """Returns (arrays: dict[str, float32 ndarray], config: dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} (expected {MAGIC!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if dtype_code != DTYPE_F32:
            raise CheckpointError(f"{path}: array {name!r} has unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        arrays[name] = arr.copy()  # writable, C-order, 0-d preserved
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + blob_len].decode("utf-8"))
    if off + blob_len != len(raw):
        raise CheckpointError(f"{path}: trailing garbage after config blob")
    return arrays, config
