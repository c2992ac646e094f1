"""Binary checkpoints and the mask-state CSV sidecar.

Checkpoint layout (all integers u32 little-endian)::

    b"SMOT" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SMOT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
        pos = 12
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(raw):
                raise CheckpointFormatError(f"{path}: truncated data for tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as e:
        raise CheckpointFormatError(f"{path}: truncated checkpoint ({e})") from None
    return out


def write_mask_state(path, items) -> None:
    """``items``: iterable of (sample_id, k) pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "k"])
        for sid, k in items:
            w.writerow([int(sid), int(k)])


def read_mask_state(path) -> Dict[int, int]:
    with open(path, newline="") as fh:
        return {int(r["sample_id"]): int(r["k"]) for r in csv.DictReader(fh)}
