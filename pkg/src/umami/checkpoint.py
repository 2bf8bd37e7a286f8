"""Single-file tensor store: JSON header + raw little-endian tensor bytes.

Layout: 8-byte little-endian uint64 header length, then the UTF-8 JSON
header, then tensor data at the recorded offsets (relative to the data
start). Headers are dumped with sorted keys and tensors written in sorted
name order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {"float64": "<f8", "int64": "<i8", "uint8": "|u1"}


class CheckpointError(RuntimeError):
    pass


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return np.ascontiguousarray(arr.astype(_DTYPES[arr.dtype.name]))


def save_checkpoint(path: Path, tensors: dict, meta: dict) -> None:
    """Write tensors plus JSON-serializable metadata to one file."""
    path = Path(path)
    names = sorted(tensors)
    arrays = {n: _to_numpy(tensors[n]) for n in names}
    table = {}
    offset = 0
    for n in names:
        a = arrays[n]
        table[n] = {
            "dtype": a.dtype.name if a.dtype.name in _DTYPES else str(a.dtype),
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": int(a.nbytes),
        }
        offset += a.nbytes
    header = {"version": FORMAT_VERSION, "meta": meta, "tensors": table}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for n in names:
                f.write(arrays[n].tobytes())
    except OSError as e:
        raise CheckpointError(f"failed writing checkpoint {path}: {e}") from e


def load_checkpoint(path: Path) -> tuple[dict, dict]:
    """Read back (tensors as numpy arrays, meta dict)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"failed reading checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode())
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {header.get('version')}, "
            f"expected {FORMAT_VERSION}"
        )
    data = raw[8 + hlen:]
    tensors = {}
    for name, spec in header["tensors"].items():
        dt = np.dtype(_DTYPES[spec["dtype"]])
        start, nbytes = spec["offset"], spec["nbytes"]
        arr = np.frombuffer(data[start:start + nbytes], dtype=dt)
        tensors[name] = arr.reshape(spec["shape"]).copy()
    return tensors, header["meta"]
