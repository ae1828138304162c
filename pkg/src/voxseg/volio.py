"""Bit-exact on-disk volumes.

Layout: magic "V3D1" | dtype code u8 (0 = float32, 1 = uint16) |
D,H,W as little-endian u32 | channel count u32 (float32 only) | payload,
little-endian, C-major then D,H,W row-major.  Writes go through a
temp-file rename so readers never observe a partial file.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import SpecError

MAGIC = b"V3D1"
_CODE_F32 = 0
_CODE_U16 = 1


def write_volume(path, array: np.ndarray) -> None:
    """float32 (C,D,H,W) or uint16 labels (D,H,W)."""
    path = Path(path)
    if array.dtype == np.float32 and array.ndim == 4:
        code = _CODE_F32
        c, d, h, w = array.shape
        header = MAGIC + struct.pack("<BIIII", code, d, h, w, c)
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    elif array.dtype == np.uint16 and array.ndim == 3:
        code = _CODE_U16
        d, h, w = array.shape
        header = MAGIC + struct.pack("<BIII", code, d, h, w)
        payload = np.ascontiguousarray(array, dtype="<u2").tobytes()
    else:
        raise SpecError(f"unsupported volume: dtype {array.dtype}, ndim {array.ndim}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    os.replace(tmp, path)


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise SpecError(f"{path}: not a V3D1 volume")
    code = blob[4]
    if code == _CODE_F32:
        d, h, w, c = struct.unpack_from("<IIII", blob, 5)
        offset = 5 + 16
        count = c * d * h * w
        expect = offset + 4 * count
        if len(blob) != expect:
            raise SpecError(f"{path}: payload length {len(blob) - offset}, "
                            f"expected {4 * count}")
        return np.frombuffer(blob, dtype="<f4", count=count,
                             offset=offset).reshape(c, d, h, w).copy()
    if code == _CODE_U16:
        d, h, w = struct.unpack_from("<III", blob, 5)
        offset = 5 + 12
        count = d * h * w
        if len(blob) != offset + 2 * count:
            raise SpecError(f"{path}: truncated label payload")
        return np.frombuffer(blob, dtype="<u2", count=count,
                             offset=offset).reshape(d, h, w).copy()
    raise SpecError(f"{path}: unknown dtype code {code}")
