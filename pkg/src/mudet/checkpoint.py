"""Versioned binary parameter checkpoints.

Layout (all little-endian): magic ``MUDT``, u32 version, then one record
per tensor: u32 name length, UTF-8 name, u32 rank, u64 extents, f64
row-major payload. Records run to end of file; anything partial is an
error.
"""

import struct

import numpy as np

MAGIC = b"MUDT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict):
    """Write name -> ndarray mapping; iteration order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_arrays(path) -> dict:
    """Read a checkpoint back into an ordered name -> ndarray mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    off = 8
    total = len(blob)
    while off < total:
        if off + 4 > total:
            raise CheckpointError(f"{path}: truncated record header at byte {off}")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen + 4 > total:
            raise CheckpointError(f"{path}: truncated record at byte {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + 8 * rank > total:
            raise CheckpointError(f"{path}: truncated extents for {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        count = 1
        for ext in shape:
            count *= ext
        nbytes = 8 * count
        if off + nbytes > total:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        out[name] = arr.astype(np.float64)
        off += nbytes
    return out
