"""Reader and writer for the BMAP1 raw volume format.

Layout (little-endian)::

    b"BMAP1\\n"
    u32 nx, u32 ny, u32 nz
    u8  kind         0 = full volume, 1 = masked vector, 2 = mask
    kind 0: nx*ny*nz float32 in C order
    kind 1: u16 name length, UTF-8 mask name, then p float32
    kind 2: nx*ny*nz uint8 (0/1) in C order
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .volume import BrainMask, VolumeGrid

MAGIC = b"BMAP1\n"
KIND_VOLUME = 0
KIND_MASKED = 1
KIND_MASK = 2

_HEADER = struct.Struct("<IIIB")


class BmapError(ValueError):
    pass


def _header(dims, kind: int) -> bytes:
    return MAGIC + _HEADER.pack(*dims, kind)


def _write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_volume(path, volume: np.ndarray) -> None:
    vol = np.ascontiguousarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise BmapError(f"volume must be 3-D, got shape {vol.shape}")
    _write(path, _header(vol.shape, KIND_VOLUME) + vol.tobytes(order="C"))


def write_masked_vector(path, mask: BrainMask, data: np.ndarray, mask_name: str) -> None:
    data = np.asarray(data)
    if data.shape != (mask.p,):
        raise BmapError(f"data length {data.shape} does not match mask p={mask.p}")
    name = mask_name.encode("utf-8")
    payload = (_header(mask.grid.dims, KIND_MASKED) + struct.pack("<H", len(name)) + name
               + np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write(path, payload)


def write_mask(path, mask: BrainMask) -> None:
    write_cells(path, mask.in_mask)


def write_cells(path, cells: np.ndarray) -> None:
    """Write any 3-D boolean volume (possibly empty) as a kind-2 file."""
    cells = np.ascontiguousarray(cells, dtype=bool)
    if cells.ndim != 3:
        raise BmapError(f"cell volume must be 3-D, got shape {cells.shape}")
    _write(path, _header(cells.shape, KIND_MASK) + cells.astype(np.uint8).tobytes(order="C"))


def _read_header(buf: bytes, path) -> tuple[tuple[int, int, int], int, int]:
    if buf[: len(MAGIC)] != MAGIC:
        raise BmapError(f"{path}: bad magic, not a BMAP1 file")
    off = len(MAGIC)
    if len(buf) < off + _HEADER.size:
        raise BmapError(f"{path}: truncated header")
    nx, ny, nz, kind = _HEADER.unpack_from(buf, off)
    return (nx, ny, nz), kind, off + _HEADER.size


def read_bmap(path):
    """Read any BMAP1 file.

    Returns
    -------
    (kind, dims, payload, mask_name)
        ``payload`` is a float32 volume (kind 0), a float32 vector (kind 1)
        or a boolean volume (kind 2). ``mask_name`` is only set for kind 1.
    """
    buf = Path(path).read_bytes()
    dims, kind, off = _read_header(buf, path)
    n_cells = dims[0] * dims[1] * dims[2]
    if kind == KIND_VOLUME:
        if len(buf) - off != 4 * n_cells:
            raise BmapError(f"{path}: payload size mismatch")
        return kind, dims, np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims), None
    if kind == KIND_MASK:
        if len(buf) - off != n_cells:
            raise BmapError(f"{path}: payload size mismatch")
        cells = np.frombuffer(buf, dtype=np.uint8, offset=off)
        if np.any(cells > 1):
            raise BmapError(f"{path}: mask cells must be 0 or 1")
        return kind, dims, cells.reshape(dims).astype(bool), None
    if kind == KIND_MASKED:
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off: off + nlen].decode("utf-8")
        off += nlen
        if (len(buf) - off) % 4:
            raise BmapError(f"{path}: payload size mismatch")
        return kind, dims, np.frombuffer(buf, dtype="<f4", offset=off).copy(), name
    raise BmapError(f"{path}: unknown payload kind {kind}")


def read_mask(path, voxel_size=(1.0, 1.0, 1.0)) -> BrainMask:
    kind, dims, payload, _ = read_bmap(path)
    if kind != KIND_MASK:
        raise BmapError(f"{path}: expected a mask file, found kind {kind}")
    return BrainMask(VolumeGrid(dims, voxel_size), payload)


def read_masked_vector(path, mask: BrainMask) -> np.ndarray:
    """Read a map as a length-p float vector, accepting full volumes too."""
    kind, dims, payload, _ = read_bmap(path)
    if dims != mask.grid.dims:
        raise BmapError(f"{path}: grid {dims} does not match mask grid {mask.grid.dims}")
    if kind == KIND_VOLUME:
        return mask.apply(payload).astype(np.float64)
    if kind == KIND_MASKED:
        if payload.size != mask.p:
            raise BmapError(f"{path}: vector length {payload.size} does not match mask p={mask.p}")
        return payload.astype(np.float64)
    raise BmapError(f"{path}: expected a map, found a mask")
