"""Volume representation, NIfTI-1 I/O and trilinear interpolation.

Voxel arrays are stored as numpy arrays of shape ``(nx, ny, nz)`` indexed
``[i, j, k]``. On disk NIfTI uses x-fastest order, which is Fortran order for
such an array; conversion happens only in :func:`read_nifti` and
:func:`write_nifti`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BadMagic,
    HeaderInconsistent,
    TruncatedFile,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> (numpy kind, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
    64: ("f8", 64),
}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def header_dtype(byteorder: str = "<") -> np.dtype:
    """Structured dtype of the 348-byte NIfTI-1 header in the given byte order."""
    fields = []
    for entry in _HEADER_FIELDS:
        name, code = entry[0], entry[1]
        if code[0] in "iuf":
            code = byteorder + code
        fields.append((name, code) + tuple(entry[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


@dataclass(frozen=True)
class Volume3D:
    """Immutable dense 3D scalar grid.

    ``affine`` maps voxel indices to world (mm) coordinates. ``data`` is
    always float64, finite and read-only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains NaN or Inf")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        if self.affine is None:
            affine = np.diag(spacing + (1.0,))
        else:
            affine = np.array(self.affine, dtype=np.float64, copy=True)
            if affine.shape != (4, 4):
                raise ValueError("affine must be 4x4")
        data.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume on the same grid with different voxel values."""
        return Volume3D(data, self.spacing, self.affine)

    def linear_data(self) -> np.ndarray:
        """Voxel values in x-fastest linear order."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class Mask3D:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=bool, copy=True)
        if data.ndim != 3:
            raise ValueError("mask must be 3D")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    srow_x: tuple[float, ...]
    srow_y: tuple[float, ...]
    srow_z: tuple[float, ...]
    sform_code: int
    magic: bytes
    byteorder: str = "<"

    @property
    def sform(self) -> np.ndarray:
        return np.array([self.srow_x, self.srow_y, self.srow_z, (0.0, 0.0, 0.0, 1.0)])


# ---------------------------------------------------------------- NIfTI I/O


def _parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header is {len(raw)} bytes, need {HEADER_SIZE}")
    native = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    if native == HEADER_SIZE:
        order = "<"
    elif int(np.frombuffer(raw[:4], dtype=">i4")[0]) == HEADER_SIZE:
        order = ">"
    else:
        raise HeaderInconsistent(f"sizeof_hdr is {native}, not 348 in either byte order")
    h = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order))[0]
    magic = bytes(h["magic"]).ljust(4, b"\0")
    if magic != b"n+1\0":
        raise BadMagic(f"unsupported magic {magic!r}; only single-file NIfTI-1 is read")
    hdr = NiftiHeader(
        sizeof_hdr=int(h["sizeof_hdr"]),
        dim=tuple(int(d) for d in h["dim"]),
        datatype=int(h["datatype"]),
        bitpix=int(h["bitpix"]),
        pixdim=tuple(float(p) for p in h["pixdim"]),
        vox_offset=float(h["vox_offset"]),
        scl_slope=float(h["scl_slope"]),
        scl_inter=float(h["scl_inter"]),
        srow_x=tuple(float(v) for v in h["srow_x"]),
        srow_y=tuple(float(v) for v in h["srow_y"]),
        srow_z=tuple(float(v) for v in h["srow_z"]),
        sform_code=int(h["sform_code"]),
        magic=magic,
        byteorder=order,
    )
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype}")
    if DATATYPES[hdr.datatype][1] != hdr.bitpix:
        raise HeaderInconsistent(f"bitpix {hdr.bitpix} does not match datatype {hdr.datatype}")
    ndim = hdr.dim[0]
    if ndim not in (3, 4) or any(d < 1 for d in hdr.dim[1 : ndim + 1]):
        raise HeaderInconsistent(f"bad dim field {hdr.dim}")
    if hdr.vox_offset < HEADER_SIZE:
        raise HeaderInconsistent(f"vox_offset {hdr.vox_offset} inside header")
    return hdr


def read_nifti_array(path: str | os.PathLike) -> tuple[np.ndarray, NiftiHeader]:
    """Read a 3D or 4D single-file NIfTI-1 image as a float64 array (C-indexed [i, j, k, ...])."""
    with open(path, "rb") as f:
        raw = f.read()
    hdr = _parse_header(raw)
    ndim = hdr.dim[0]
    shape = tuple(hdr.dim[1 : ndim + 1])
    kind, bitpix = DATATYPES[hdr.datatype]
    dt = np.dtype(kind).newbyteorder(hdr.byteorder)
    offset = int(hdr.vox_offset)
    nbytes = int(np.prod(shape)) * bitpix // 8
    if len(raw) < offset + nbytes:
        raise TruncatedFile(f"{path}: file has {len(raw)} bytes, payload needs {offset + nbytes}")
    flat = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        if hdr.scl_slope != 1.0 or hdr.scl_inter != 0.0:
            data = data * hdr.scl_slope + hdr.scl_inter
    return data, hdr


def _affine_from_header(hdr: NiftiHeader, spacing) -> np.ndarray:
    if hdr.sform_code > 0:
        return hdr.sform
    return np.diag(tuple(spacing) + (1.0,))


def read_nifti(path: str | os.PathLike) -> tuple[Volume3D, NiftiHeader]:
    data, hdr = read_nifti_array(path)
    if data.ndim == 4:
        if data.shape[3] != 1:
            raise HeaderInconsistent(f"{path}: expected a 3D volume, found {data.shape[3]} frames")
        data = data[..., 0]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    return Volume3D(data, spacing, _affine_from_header(hdr, spacing)), hdr


def _encode_payload(data: np.ndarray, datatype: int) -> np.ndarray:
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype}")
    kind = DATATYPES[datatype][0]
    if kind == "f8":
        return data.astype("<f8")
    if kind == "f4":
        limit = np.finfo(np.float32).max
        if np.any(np.abs(data) > limit):
            raise OverflowError("value not representable as float32")
        return data.astype("<f4")
    # integer targets are rounded then clamped to the representable range
    info = np.iinfo(np.dtype(kind))
    return np.clip(np.rint(data), info.min, info.max).astype(np.dtype(kind).newbyteorder("<"))


def write_nifti_array(
    data: np.ndarray,
    path: str | os.PathLike,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    affine: np.ndarray | None = None,
    datatype: int = 64,
) -> None:
    """Write a 3D or 4D array as little-endian single-file NIfTI-1."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim not in (3, 4):
        raise ValueError("only 3D and 4D arrays can be written")
    payload = _encode_payload(data, datatype)
    if affine is None:
        affine = np.diag(tuple(spacing) + (1.0,))
    h = np.zeros((), dtype=header_dtype("<"))
    h["sizeof_hdr"] = HEADER_SIZE
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : data.ndim + 1] = data.shape
    h["dim"] = dim
    h["datatype"] = datatype
    h["bitpix"] = DATATYPES[datatype][1]
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = spacing
    h["pixdim"] = pixdim
    h["vox_offset"] = VOX_OFFSET
    h["scl_slope"] = 1.0
    h["scl_inter"] = 0.0
    h["xyzt_units"] = 2  # mm
    h["sform_code"] = 1
    h["srow_x"] = affine[0]
    h["srow_y"] = affine[1]
    h["srow_z"] = affine[2]
    h["magic"] = b"n+1\0"
    with open(path, "wb") as f:
        f.write(h.tobytes())
        f.write(b"\0\0\0\0")
        f.write(payload.tobytes(order="F"))


def write_nifti(vol: Volume3D, path: str | os.PathLike, datatype: int = 64) -> None:
    """Write ``vol`` as a single-file .nii (vox_offset 352, slope 1, intercept 0).

    Integer datatypes round to nearest and clamp to the type's range.
    Float32 targets raise ``OverflowError`` for values beyond float32 range.
    """
    write_nifti_array(vol.data, path, vol.spacing, vol.affine, datatype)


# ----------------------------------------------------------- interpolation


def trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``data`` at continuous voxel coordinates.

    ``coords`` has shape ``(3, ...)``. Points outside ``[0, n-1]`` along any
    axis evaluate to 0.
    """
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    x, y, z = (c.ravel() for c in coords)
    nx, ny, nz = data.shape
    inside = (x >= 0) & (x <= nx - 1) & (y >= 0) & (y <= ny - 1) & (z >= 0) & (z <= nz - 1)

    def split(c, n):
        c0 = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.intp)
        c0 = np.where(inside, c0, 0)
        frac = np.where(inside, c - c0, 0.0)
        c1 = np.minimum(c0 + 1, n - 1)
        return c0, c1, frac

    x0, x1, fx = split(x, nx)
    y0, y1, fy = split(y, ny)
    z0, z1, fz = split(z, nz)
    flat = data.ravel()
    sy, sx = nz, ny * nz

    def at(i, j, k):
        return flat[i * sx + j * sy + k]

    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    c00 = at(x0, y0, z0) * gx + at(x1, y0, z0) * fx
    c10 = at(x0, y1, z0) * gx + at(x1, y1, z0) * fx
    c01 = at(x0, y0, z1) * gx + at(x1, y0, z1) * fx
    c11 = at(x0, y1, z1) * gx + at(x1, y1, z1) * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    val = c0 * gz + c1 * fz
    return np.where(inside, val, 0.0).reshape(out_shape)


def sample_trilinear(vol: Volume3D, p: Sequence[float]) -> float:
    """Trilinear value at one continuous voxel coordinate (zero outside the grid)."""
    return float(trilinear(vol.data, np.asarray(p, dtype=np.float64).reshape(3, 1))[0])


def grid_coords(dims: Sequence[int]) -> np.ndarray:
    """Voxel index grid of shape ``(3, nx, ny, nz)``."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))


def resample_array(data: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Trilinear resample of an array onto ``target`` dims over the unit cube.

    Target index ``j`` maps to source coordinate ``j * (n_src - 1) / (n_tgt - 1)``.
    """
    axes = []
    for n_src, n_tgt in zip(data.shape, target):
        if n_tgt == 1:
            axes.append(np.zeros(1))
        else:
            axes.append(np.arange(n_tgt) * ((n_src - 1) / (n_tgt - 1)))
    # separable: interpolate one axis at a time
    out = data
    for axis, pos in enumerate(axes):
        n = out.shape[axis]
        if n == len(pos) and np.array_equal(pos, np.arange(n)):
            continue
        i0 = np.clip(np.floor(pos).astype(np.intp), 0, max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        frac = pos - i0
        shape = [1, 1, 1]
        shape[axis] = len(pos)
        frac = frac.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1.0 - frac) + np.take(out, i1, axis=axis) * frac
    return out


def resample_to_shape(vol: Volume3D, target: Sequence[int]) -> Volume3D:
    """Resample to new dims, rescaling spacing so the physical extent is kept."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target}")
    data = resample_array(vol.data, target)
    spacing = []
    for s, n_src, n_tgt in zip(vol.spacing, vol.dims, target):
        spacing.append(s * (n_src - 1) / (n_tgt - 1) if n_src > 1 and n_tgt > 1 else s)
    scale = np.diag([sp / s for sp, s in zip(spacing, vol.spacing)] + [1.0])
    return Volume3D(data, tuple(spacing), vol.affine @ scale)
