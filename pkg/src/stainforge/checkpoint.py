"""Deterministic binary checkpoint format.

A checkpoint is a magic tag, a format version, a JSON header and a sequence of
raw little-endian tensor blobs. The layout is fully determined by its contents,
so save -> load -> save reproduces the file byte for byte (needed for resume
and reproducibility checks).
"""

import json
import struct

import numpy as np
import torch

MAGIC = b"STFG"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
}


class CheckpointError(Exception):
    """Raised for unreadable, corrupt or incompatible checkpoint files."""


def save_tensors(path, tensors, meta=None):
    """Write named tensors plus a JSON-serializable metadata dict to `path`.

    `tensors` is an ordered mapping name -> torch.Tensor (or ndarray); insertion
    order is preserved in the file.
    """
    entries = []
    blobs = []
    for name, t in tensors.items():
        if isinstance(t, torch.Tensor):
            arr = t.detach().cpu().numpy()
        else:
            arr = np.asarray(t)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype!r} for {name!r}")
        blob = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(blob)}
        )
        blobs.append(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta if meta is not None else {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_tensors(path):
    """Read a checkpoint written by `save_tensors`.

    Returns (tensors, meta) where tensors is an ordered dict name -> torch.Tensor.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a stainforge checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + header_len])
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    tensors = {}
    offset = 12 + header_len
    for entry in header["tensors"]:
        nbytes = entry["nbytes"]
        blob = raw[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    return tensors, header["meta"]
