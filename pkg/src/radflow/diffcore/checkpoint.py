"""Binary checkpoint container for named float64 parameter tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"CFNF"
    version u32      currently 1
    records, repeated until EOF:
        name_len u32
        name     UTF-8 bytes
        rank     u64
        dims     u64 * rank
        payload  float64 little-endian, prod(dims) values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFNF"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    off = 8
    while off < len(buf):
        try:
            (name_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + name_len].decode("utf-8")
            if len(buf) < off + name_len:
                raise struct.error("truncated name")
            off += name_len
            (rank,) = struct.unpack_from("<Q", buf, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            end = off + 8 * count
            if end > len(buf):
                raise struct.error("truncated payload")
            data = np.frombuffer(buf[off:end], dtype="<f8").reshape(dims).astype(np.float64)
            off = end
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt checkpoint record ({e})") from e
        arrays[name] = data
    return arrays
