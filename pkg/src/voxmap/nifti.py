"""NIfTI-1 reading and writing for volumes, label maps, and vector fields.

Only the single-file flavor is supported: 348-byte header, magic ``n+1\\0``,
data at ``vox_offset``, optional gzip (by ``.gz`` suffix).  Volumes are
written little-endian: scalar floats as float32 (datatype 16), labels as
uint16 (datatype 512).  Displacement fields use one 5D vector file
(dim = [5, nx, ny, nz, 1, 3], intent code 1007) holding the x/y/z
components in mm; the round trip is bit-exact for float32 payloads.

Grids are axis-aligned: spacing comes from ``pixdim``, the origin from the
sform translation column (or qoffset as a fallback).  Rotational sforms are
out of scope and rejected.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume

_HDR_SIZE = 348
_MAGIC = b"n+1\x00"
_INTENT_VECTOR = 1007

_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
    768: np.dtype("<u4"),
}
_INT_CODES = {2, 4, 8, 256, 512, 768}


class NiftiError(ValueError):
    """Raised for malformed or unsupported NIfTI content."""


def _open_read(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _open_write(path: Path):
    if path.suffix == ".gz":
        # fixed mtime keeps rewrites byte-identical
        return gzip.GzipFile(filename="", mode="wb", fileobj=open(path, "wb"),
                             mtime=0)
    return open(path, "wb")


def _pack_header(dims, spacing, origin, datatype, bitpix, *, n5: int = 0,
                 intent: int = 0) -> bytes:
    nx, ny, nz = dims
    ndim = 5 if n5 else 3
    dim = [ndim, nx, ny, nz, 1, max(n5, 1), 1, 1]
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 68, intent)           # intent_code
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)           # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)             # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)             # scl_inter
    struct.pack_into("<b", hdr, 123, 2)               # xyzt_units: mm
    struct.pack_into("<80s", hdr, 148, b"voxmap")
    struct.pack_into("<h", hdr, 252, 0)               # qform_code
    struct.pack_into("<h", hdr, 254, 1)               # sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])
    struct.pack_into("<4s", hdr, 344, _MAGIC)
    return bytes(hdr)


def _parse_header(raw: bytes, path: Path):
    if len(raw) < _HDR_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == _HDR_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _HDR_SIZE:
        endian = ">"
    else:
        raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr)")
    magic = struct.unpack_from("4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: two-file NIfTI (.hdr/.img) is unsupported")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    scl_slope = struct.unpack_from(endian + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(endian + "f", raw, 116)[0]
    sform_code = struct.unpack_from(endian + "h", raw, 254)[0]
    qform_code = struct.unpack_from(endian + "h", raw, 252)[0]
    srow = [struct.unpack_from(endian + "4f", raw, 280 + 16 * r)
            for r in range(3)]
    intent = struct.unpack_from(endian + "h", raw, 68)[0]

    ndim = dim[0]
    n5 = 1
    if ndim == 3:
        pass
    elif ndim == 5 and dim[4] == 1:
        n5 = dim[5]
    elif ndim == 4 and dim[4] == 1:
        pass  # degenerate time axis
    else:
        raise NiftiError(
            f"{path}: unsupported dimensionality {ndim} (dim={dim[1:ndim+1]})"
        )
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise NiftiError(f"{path}: non-positive dims {(nx, ny, nz)}")
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")

    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        for r, ax in zip(srow, (0, 1, 2)):
            off_axis = [abs(r[c]) for c in range(3) if c != ax]
            if any(o > 1e-5 * max(abs(r[ax]), 1.0) for o in off_axis):
                raise NiftiError(
                    f"{path}: rotational sform is unsupported (axis-aligned "
                    "grids only)"
                )
        origin = (float(srow[0][3]), float(srow[1][3]), float(srow[2][3]))
    elif qform_code > 0:
        origin = struct.unpack_from(endian + "3f", raw, 268)
        origin = tuple(float(o) for o in origin)
    else:
        origin = (0.0, 0.0, 0.0)

    dtype = _DTYPES[datatype]
    if endian == ">":
        dtype = dtype.newbyteorder(">")
    return {
        "dims": (nx, ny, nz),
        "n5": n5,
        "spacing": spacing,
        "origin": origin,
        "dtype": dtype,
        "datatype": datatype,
        "vox_offset": int(vox_offset),
        "scl_slope": float(scl_slope),
        "scl_inter": float(scl_inter),
        "intent": intent,
    }


def _read_raw(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    try:
        with _open_read(path) as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise NiftiError(f"{path}: unreadable ({exc})") from exc
    hdr = _parse_header(raw, path)
    nx, ny, nz = hdr["dims"]
    count = nx * ny * nz * hdr["n5"]
    start = max(hdr["vox_offset"], _HDR_SIZE)
    nbytes = count * hdr["dtype"].itemsize
    if len(raw) < start + nbytes:
        raise NiftiError(
            f"{path}: truncated data (expected {nbytes} bytes at offset "
            f"{start}, file has {len(raw) - start})"
        )
    data = np.frombuffer(raw, dtype=hdr["dtype"], count=count, offset=start)
    # on-disk order is x fastest, then y, z, t(=1), component
    shape = (hdr["n5"], nz, ny, nx) if hdr["n5"] > 1 else (nz, ny, nx)
    return hdr, data.reshape(shape)


def read_volume(path) -> Volume | LabelVolume:
    """Read a 3D NIfTI-1 scalar volume.

    Integer-typed files with trivial scaling load as :class:`LabelVolume`;
    everything else loads as a float32 :class:`Volume`.
    """
    hdr, data = _read_raw(path)
    if hdr["n5"] > 1:
        raise NiftiError(f"{path}: vector file; use read_field()")
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope not in (0.0, 1.0) or inter != 0.0
    if hdr["datatype"] in _INT_CODES and not scaled:
        labels = np.ascontiguousarray(data.astype(np.int32, copy=False))
        if labels.min() < 0:
            return Volume(labels.astype(np.float32), hdr["spacing"],
                          hdr["origin"])
        return LabelVolume(labels, hdr["spacing"], hdr["origin"])
    vals = data.astype(np.float32)
    if scaled and slope != 0.0:
        vals = vals * np.float32(slope) + np.float32(inter)
    return Volume(np.ascontiguousarray(vals), hdr["spacing"], hdr["origin"])


def write_volume(v: Volume | LabelVolume, path) -> None:
    """Write a volume as NIfTI-1 (float32 for scalars, uint16 for labels)."""
    path = Path(path)
    if isinstance(v, LabelVolume):
        if v.labels.max(initial=0) > np.iinfo(np.uint16).max:
            raise NiftiError(f"{path}: labels exceed uint16 range")
        payload = v.labels.astype("<u2")
        datatype, bitpix = 512, 16
        spacing, origin = v.spacing, v.origin
    else:
        payload = v.values.astype("<f4")
        datatype, bitpix = 16, 32
        spacing, origin = v.spacing, v.origin
    hdr = _pack_header(v.dims, spacing, origin, datatype, bitpix)
    try:
        with _open_write(path) as fh:
            fh.write(hdr)
            fh.write(b"\x00" * 4)  # pad to vox_offset 352
            fh.write(np.ascontiguousarray(payload).tobytes())
    except OSError as exc:
        raise OSError(f"failed to write volume to {path}: {exc}") from exc


def write_field(u: np.ndarray, spacing, origin, path) -> None:
    """Write a displacement field (nz, ny, nx, 3) as one 5D vector NIfTI."""
    path = Path(path)
    if u.ndim != 4 or u.shape[3] != 3:
        raise ValueError(f"field must have shape (nz, ny, nx, 3), got {u.shape}")
    nz, ny, nx = u.shape[:3]
    comps = np.ascontiguousarray(
        np.moveaxis(u.astype("<f4", copy=False), 3, 0)
    )
    hdr = _pack_header((nx, ny, nz), tuple(spacing), tuple(origin),
                       16, 32, n5=3, intent=_INTENT_VECTOR)
    try:
        with _open_write(path) as fh:
            fh.write(hdr)
            fh.write(b"\x00" * 4)
            fh.write(comps.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write field to {path}: {exc}") from exc


def read_field(path, expect_geometry=None):
    """Read a displacement field written by :func:`write_field`.

    Returns (u, spacing, origin) with u float32 of shape (nz, ny, nx, 3).
    If ``expect_geometry`` (dims, spacing, origin) is given, mismatches
    raise :class:`NiftiError`.
    """
    path = Path(path)
    hdr, data = _read_raw(path)
    if hdr["n5"] != 3:
        raise NiftiError(
            f"{path}: expected a 3-component vector field, got "
            f"{hdr['n5']} component(s)"
        )
    u = np.ascontiguousarray(
        np.moveaxis(data.astype(np.float32, copy=False), 0, 3)
    )
    if expect_geometry is not None:
        dims, spacing, origin = expect_geometry
        nx, ny, nz = dims
        if u.shape[:3] != (nz, ny, nx):
            raise NiftiError(
                f"{path}: field dims {u.shape[2::-1]} do not match expected "
                f"{tuple(dims)}"
            )
        if not np.allclose(hdr["spacing"], spacing, atol=1e-5) or \
                not np.allclose(hdr["origin"], origin, atol=1e-4):
            raise NiftiError(f"{path}: field geometry mismatch")
    return u, hdr["spacing"], hdr["origin"]
