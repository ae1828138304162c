"""Self-contained binary checkpoints.

Layout: magic "VCK1" | u32 version | u64 meta length | meta JSON |
concatenated little-endian array payloads.  The JSON (sorted keys, no
timestamps) carries the full canonical config text, epoch, RNG state and
the array directory, so identical training runs produce byte-identical
files and a checkpoint alone suffices to rebuild the model for
evaluation or inference.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SpecError

MAGIC = b"VCK1"
VERSION = 1
_DTYPES = {"<f4": "<f4", "<f8": "<f8"}


@dataclass
class CheckpointData:
    epoch: int
    config_text: str
    config_hash: str
    rng_state: dict
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise SpecError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path, params: dict[str, np.ndarray],
                    velocity: dict[str, np.ndarray], epoch: int,
                    config_text: str, config_hash: str, rng_state: dict) -> None:
    path = Path(path)
    directory = []
    blobs = []
    offset = 0
    for kind, arrays in (("param", params), ("velocity", velocity)):
        for name, arr in arrays.items():
            blob = np.ascontiguousarray(arr, dtype=_dtype_tag(arr)).tobytes()
            directory.append({"name": name, "kind": kind, "dtype": _dtype_tag(arr),
                              "shape": list(arr.shape), "offset": offset,
                              "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    meta = json.dumps({"epoch": epoch, "config": config_text,
                       "config_hash": config_hash, "rng_state": rng_state,
                       "arrays": directory}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointData:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise SpecError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise SpecError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(blob[16:16 + meta_len].decode())
    payload = blob[16 + meta_len:]
    params: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    for entry in meta["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        (params if entry["kind"] == "param" else velocity)[entry["name"]] = arr
    return CheckpointData(epoch=meta["epoch"], config_text=meta["config"],
                          config_hash=meta["config_hash"],
                          rng_state=meta["rng_state"], params=params,
                          velocity=velocity)
