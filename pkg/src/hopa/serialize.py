"""Binary tensor files and checkpoint directories.

A tensor file is: the 4-byte magic ``HOT4``, four little-endian uint32 dims
(n, c, h, w), then n*c*h*w little-endian float64 values in row-major order.

A checkpoint is a directory of one tensor file per named array plus
``manifest.json`` recording names, true shapes, the training iteration, and
the RNG state.  Arrays of rank < 4 are stored with their shape right-padded
by ones; the manifest keeps the original shape so loading is exact.  Writes
are deterministic byte-for-byte for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HOT4"
_HEADER = struct.Struct("<4I")

__all__ = ["MAGIC", "write_tensor", "read_tensor", "save_checkpoint", "load_checkpoint"]


def write_tensor(path, array: np.ndarray):
    """Write a rank-4 float64 array; lower ranks are right-padded with ones."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 4:
        raise ValueError(f"tensor file holds at most rank 4, got shape {arr.shape}")
    shape = arr.shape + (1,) * (4 - arr.ndim)
    arr = np.ascontiguousarray(arr.reshape(shape))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(*shape))
        f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back as a rank-4 float64 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 4 + _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    dims = _HEADER.unpack_from(blob, 4)
    count = int(np.prod(dims))
    expected = 4 + _HEADER.size + 8 * count
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for dims {dims}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=4 + _HEADER.size, count=count)
    return data.reshape(dims).astype(np.float64)


def save_checkpoint(directory, arrays, iteration: int, rng_state: dict, extra: dict | None = None):
    """Persist named arrays plus a manifest.

    arrays: iterable of (name, ndarray).  Names map 1:1 to files ``name.hot4``.
    extra: optional JSON-serializable metadata (e.g. model hyper-parameters).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in sorted(arrays, key=lambda kv: kv[0]):
        arr = np.asarray(arr, dtype=np.float64)
        fname = name + ".hot4"
        write_tensor(directory / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": "hopa-checkpoint-v1",
        "iteration": int(iteration),
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": entries,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(directory):
    """Return (name -> ndarray with original shape, iteration, rng_state, extra)."""
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != "hopa-checkpoint-v1":
        raise ValueError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    arrays = {}
    for entry in manifest["tensors"]:
        arr = read_tensor(directory / entry["file"])
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest["iteration"], manifest["rng_state"], manifest.get("extra", {})
