"""Minimal NIfTI-1 reader/writer (little-endian, float32/int16, .nii/.nii.gz).

Geometry travels in the sform affine (sform preferred over qform on read).
Scalar volumes round-trip bit-exact; 4D stacks are supported for the
statistics writer.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .grid import ImageGrid, LabelMap, Volume

_HDR_SIZE = 348
_DT_INT16 = 4
_DT_FLOAT32 = 16
_MAGIC = b"n+1\x00"


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _affine_to_grid(affine: np.ndarray, dims) -> ImageGrid:
    M = affine[:3, :3]
    spacing = np.linalg.norm(M, axis=0)
    if np.any(spacing <= 0):
        raise NiftiError("degenerate affine: zero-length column")
    direction = M / spacing
    return ImageGrid(tuple(dims), tuple(spacing), tuple(affine[:3, 3]), direction)


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    R = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    A = np.eye(4)
    A[:3, :3] = R @ np.diag([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    A[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return A


def _read_header(raw: bytes) -> dict:
    if len(raw) < _HDR_SIZE:
        raise NiftiError("file shorter than NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        raise NiftiError(f"bad sizeof_hdr {sizeof_hdr} (expected 348; big-endian unsupported)")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quatern = struct.unpack_from("<6f", raw, 256)
    srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)
    magic = raw[344:348]
    if magic not in (_MAGIC, b"ni1\x00"):
        raise NiftiError(f"bad magic {magic!r}")
    return {
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset) if vox_offset else 352,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern_b": quatern[0],
        "quatern_c": quatern[1],
        "quatern_d": quatern[2],
        "qoffset_x": quatern[3],
        "qoffset_y": quatern[4],
        "qoffset_z": quatern[5],
        "srow": srow,
    }


def read_array(path) -> tuple[np.ndarray, ImageGrid, int]:
    """Read a NIfTI file into (array, grid, datatype).

    The array has shape (nx, ny, nz) or (nx, ny, nz, nt) for 4D files.
    """
    with _open(path, "rb") as f:
        raw = f.read()
    hdr = _read_header(raw)
    ndim = hdr["dim"][0]
    if ndim not in (3, 4):
        raise NiftiError(f"unsupported number of dimensions: {ndim}")
    shape = tuple(hdr["dim"][1 : 1 + ndim])
    if any(s < 1 for s in shape):
        raise NiftiError(f"degenerate dims {shape}")
    if hdr["datatype"] == _DT_FLOAT32:
        dtype = np.dtype("<f4")
    elif hdr["datatype"] == _DT_INT16:
        dtype = np.dtype("<i2")
    else:
        raise NiftiError(f"unsupported datatype code {hdr['datatype']}")
    n = int(np.prod(shape))
    start = hdr["vox_offset"]
    payload = raw[start : start + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise NiftiError("truncated data section")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope or 1.0) + inter
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1] or 1.0, hdr["pixdim"][2] or 1.0, hdr["pixdim"][3] or 1.0, 1.0])
    grid = _affine_to_grid(affine, shape[:3])
    return np.asarray(data), grid, hdr["datatype"]


def read_volume(path) -> Volume:
    data, grid, _ = read_array(path)
    if data.ndim != 3:
        raise NiftiError("expected a 3D scalar volume")
    return Volume(grid, data.astype(np.float32))


def read_labelmap(path, label_names=None) -> LabelMap:
    data, grid, dt = read_array(path)
    if data.ndim != 3:
        raise NiftiError("expected a 3D label map")
    return LabelMap(grid, np.rint(data).astype(np.int16), dict(label_names or {}))


def write_array(data: np.ndarray, grid: ImageGrid, path, dtype=None) -> None:
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise NiftiError("only 3D/4D arrays supported")
    if dtype is None:
        dtype = np.int16 if np.issubdtype(data.dtype, np.integer) else np.float32
    dtype = np.dtype(dtype)
    if dtype == np.dtype("<f4") or dtype == np.float32:
        dt_code, bitpix, cast = _DT_FLOAT32, 32, np.dtype("<f4")
    elif dtype == np.dtype("<i2") or dtype == np.int16:
        dt_code, bitpix, cast = _DT_INT16, 16, np.dtype("<i2")
    else:
        raise NiftiError(f"unsupported write dtype {dtype}")

    ndim = data.ndim
    dim = [ndim] + list(data.shape) + [1] * (7 - ndim)
    pixdim = [1.0] + list(grid.spacing) + [1.0] * (7 - 3)
    affine = grid.affine

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, dt_code, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = _MAGIC

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # extension flag
        f.write(np.ascontiguousarray(data.astype(cast).ravel(order="F")).tobytes())


def write_volume(vol: Volume | LabelMap, path) -> None:
    if isinstance(vol, LabelMap):
        write_array(vol.data, vol.grid, path, dtype=np.int16)
    else:
        write_array(vol.data, vol.grid, path, dtype=np.float32)
