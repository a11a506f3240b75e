"""Geometric 3D volume types: scalar volumes, label volumes, bounding boxes.

Arrays are stored C-contiguous with shape (nz, ny, nx), so the flat buffer
is row-major with x fastest, matching the on-disk layout of the exchange
format.  ``dims``, ``spacing`` and ``origin`` are always given in (x, y, z)
order.  Voxel index (i, j, k) sits at physical point
``origin + (i * sx, j * sy, k * sz)`` (mm).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels


class GeometryError(ValueError):
    """Raised when two grids that must share geometry do not."""


def _as_tuple3(v) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t


@dataclass
class Volume:
    """Dense scalar 3D grid with physical spacing and origin.

    ``values`` has shape (nz, ny, nx).  ``fill_value`` is returned by
    :func:`trilinear_sample` outside the domain; ``None`` means the volume
    minimum.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fill_value: float | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be 3D, got {self.values.ndim}D")
        self.spacing = _as_tuple3(self.spacing)
        self.origin = _as_tuple3(self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as (nx, ny, nz)."""
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def geometry(self):
        return (self.dims, self.spacing, self.origin)

    def fill(self) -> float:
        if self.fill_value is not None:
            return float(self.fill_value)
        return float(self.values.min())

    def index_to_physical(self, idx) -> np.ndarray:
        """Map (i, j, k) voxel index to its physical center (mm)."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def physical_to_index(self, p) -> np.ndarray:
        """Map a physical point to continuous (i, j, k) index coordinates."""
        p = np.asarray(p, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def copy(self, values: np.ndarray | None = None) -> "Volume":
        vals = self.values.copy() if values is None else values
        return Volume(vals, self.spacing, self.origin, self.fill_value)


@dataclass
class LabelVolume:
    """Dense non-negative integer 3D grid; label 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume must be 3D, got {self.labels.ndim}D")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integer-typed, got {self.labels.dtype}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.spacing = _as_tuple3(self.spacing)
        self.origin = _as_tuple3(self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    @property
    def geometry(self):
        return (self.dims, self.spacing, self.origin)

    def mask(self, label: int | None = None) -> np.ndarray:
        """Boolean array: voxels with the given label (default: any nonzero)."""
        if label is None:
            return self.labels > 0
        return self.labels == label

    def copy(self, labels: np.ndarray | None = None) -> "LabelVolume":
        lab = self.labels.copy() if labels is None else labels
        return LabelVolume(lab, self.spacing, self.origin)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned physical-space box, min <= max componentwise (mm)."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "min", _as_tuple3(self.min))
        object.__setattr__(self, "max", _as_tuple3(self.max))
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"degenerate box: min {self.min} > max {self.max}")

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min) + np.asarray(self.max)) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max) - np.asarray(self.min)


def same_geometry(a, b, tol: float = 1e-6) -> bool:
    da, sa, oa = a.geometry
    db, sb, ob = b.geometry
    return (
        da == db
        and np.allclose(sa, sb, atol=tol, rtol=0)
        and np.allclose(oa, ob, atol=tol, rtol=0)
    )


def check_same_geometry(a, b, what: str = "volumes"):
    if not same_geometry(a, b):
        raise GeometryError(
            f"{what} must share geometry: {a.geometry} vs {b.geometry}"
        )


def trilinear_sample(v: Volume, p) -> float:
    """Trilinear interpolation of ``v`` at physical point ``p``.

    Points outside the hull of voxel centers return the fill value
    (default: volume minimum).
    """
    p = np.asarray(p, dtype=np.float64)
    return float(
        _kernels.trilinear_point(
            v.values,
            p[0], p[1], p[2],
            v.origin[0], v.origin[1], v.origin[2],
            v.spacing[0], v.spacing[1], v.spacing[2],
            v.fill(),
        )
    )


def median_filter(v: Volume, radius: int) -> Volume:
    """Cubic-window median with border truncation.

    Each output voxel is the median of the (2r+1)^3 neighborhood clipped to
    the volume bounds; even-count neighborhoods use the mean of the two
    central order statistics.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return v.copy()
    out = _kernels.median_filter_3d(v.values.astype(np.float32, copy=False), radius)
    return v.copy(values=out)


def gaussian_downsample(v: Volume, factor: int = 2) -> Volume:
    """Gaussian smoothing (sigma = 1 voxel) followed by decimation by 2.

    Spacing doubles; the origin stays at the first retained voxel center.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if any(d < 2 for d in v.dims):
        raise ValueError(f"dims must be >= 2 per axis, got {v.dims}")
    smoothed = ndimage.gaussian_filter(
        v.values.astype(np.float32, copy=False), sigma=1.0, mode="nearest"
    )
    out = np.ascontiguousarray(smoothed[::2, ::2, ::2])
    sx, sy, sz = v.spacing
    return Volume(out, (2 * sx, 2 * sy, 2 * sz), v.origin, v.fill_value)


def mask_bounding_box(m: LabelVolume, label: int) -> BoundingBox:
    """Tight physical AABB of all voxels carrying ``label``.

    The box spans voxel centers plus/minus half a spacing on each side.
    """
    sel = m.labels == label
    if not sel.any():
        raise ValueError(f"label {label} not present in volume")
    kk, jj, ii = np.nonzero(sel)
    lo_idx = np.array([ii.min(), jj.min(), kk.min()], dtype=np.float64)
    hi_idx = np.array([ii.max(), jj.max(), kk.max()], dtype=np.float64)
    sp = np.asarray(m.spacing)
    org = np.asarray(m.origin)
    return BoundingBox(
        tuple(org + lo_idx * sp - sp / 2.0),
        tuple(org + hi_idx * sp + sp / 2.0),
    )
