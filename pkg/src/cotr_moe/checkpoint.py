"""Versioned binary checkpoints: header + named parameter blocks.

Layout: 4-byte magic, u32 version, u32 header length, a canonical JSON
header (config digest, stage, block table), then the raw little-endian
parameter blocks in header order.  Everything is a deterministic function
of the saved state, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CMOE"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(Exception):
    """Bad magic, unsupported version, or a malformed/truncated file."""


def save(path, params: dict[str, np.ndarray], config_digest: str, stage: int) -> None:
    names = sorted(params)
    table = []
    blocks = []
    for name in names:
        arr = np.ascontiguousarray(params[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported parameter dtype {arr.dtype} for {name!r}")
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": arr.dtype.name,
                      "shape": list(arr.shape), "bytes": len(data)})
        blocks.append(data)
    header = json.dumps(
        {"config_digest": config_digest, "stage": int(stage), "params": table},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for data in blocks:
            fh.write(data)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, name -> array).  Raises CheckpointError on bad files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    for key in ("config_digest", "stage", "params"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    params: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header["params"]:
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype in block table")
        nbytes = entry["bytes"]
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated block {entry['name']!r}")
        arr = np.frombuffer(chunk, dtype=np.dtype(dtype).newbyteorder("<"))
        params[entry["name"]] = arr.astype(dtype).reshape(entry["shape"])
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, params
