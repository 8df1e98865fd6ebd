"""Single-file checkpoints.

Layout: the 8-byte magic ``b"VFCKPT1\\n"``, a little-endian u64 header length,
a UTF-8 JSON header, then one little-endian f32 blob per entry in header
order. The header records entry names and shapes plus free-form metadata
(epoch, rng seed, model config).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ValidationError

MAGIC = b"VFCKPT1\n"


def save_checkpoint(path, state: dict, epoch: int = 0, seed: int = 0, meta: dict | None = None):
    names = list(state)
    header = {
        "entries": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
        "epoch": int(epoch),
        "seed": int(seed),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(state, header)`` with f32 arrays keyed by entry name."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off: off + hlen].decode())
    off += hlen
    state = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        state[entry["name"]] = arr.astype(np.float32)
        off += 4 * count
    if off != len(raw):
        raise ValidationError(f"{path}: trailing bytes after last blob")
    return state, header
