"""Writer for the semcal tensor interchange format.

Implemented independently of the consumer so an export doubles as a
cross-implementation conformance check. Layout, little-endian: magic
"SEMC", version u16 (1), dtype u8 (f32=0, f64=1, u32=2), rank u8 (max
4), dims as u64 each, row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEMC"
VERSION = 1

_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u32": np.dtype("<u4")}
_CODES = {"f32": 0, "f64": 1, "u32": 2}


def write(array, dtype: str, path: str | Path) -> None:
    arr = np.ascontiguousarray(np.asarray(array), dtype=_NUMPY_DTYPES[dtype])
    if arr.ndim > 4:
        raise ValueError(f"rank {arr.ndim} exceeds format maximum 4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<B", _CODES[dtype]))
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.tobytes())
