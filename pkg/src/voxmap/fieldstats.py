"""Quantitative evaluation of deformation fields and cohort aggregates:
Dice overlap, Jacobian determinant maps, inverse consistency error, and
streaming voxel-wise mean/SD volumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .registration import DisplacementField
from .volume import GeometryError, Volume, check_same_geometry


@dataclass
class RegionStats:
    region: str
    dice: float
    ice_mean: float = float("nan")
    ice_sd: float = float("nan")


def dice(a, b) -> float:
    """Overlap 2|A∩B| / (|A|+|B|) of two same-geometry binary regions.

    Both empty is defined as 1 (vacuous agreement); exactly one empty is 0.
    """
    if hasattr(a, "geometry") and hasattr(b, "geometry"):
        check_same_geometry(a, b, "regions")
        am = a.mask() if hasattr(a, "mask") else a.values > 0
        bm = b.mask() if hasattr(b, "mask") else b.values > 0
    else:
        am = np.asarray(a, dtype=bool)
        bm = np.asarray(b, dtype=bool)
        if am.shape != bm.shape:
            raise GeometryError(f"region shapes differ: {am.shape} vs {bm.shape}")
    na = int(am.sum())
    nb = int(bm.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((am & bm).sum())
    return 2.0 * inter / (na + nb)


def jacobian_determinant(field: DisplacementField) -> Volume:
    """Per-voxel det(∇T) of T(x) = x + u(x).

    Partial derivatives use central differences in physical units
    (one-sided at the boundary).  Values below 1 mean local contraction,
    above 1 expansion; negative values flag folding.
    """
    sx, sy, sz = field.spacing
    u = field.u

    def _grad(arr, h, axis):
        if arr.shape[axis] < 2:
            return np.zeros_like(arr)
        return np.gradient(arr, h, axis=axis)

    # gradient axes of u are (z, y, x); J[a][b] = d u_a / d x_b
    grads = [
        (_grad(u[..., c], sz, 0), _grad(u[..., c], sy, 1),
         _grad(u[..., c], sx, 2))
        for c in range(3)
    ]

    def d(comp, axis):  # axis: 0=x, 1=y, 2=z
        g = grads[comp][2 - axis]
        if comp == axis:
            return g + 1.0
        return g

    j00, j01, j02 = d(0, 0), d(0, 1), d(0, 2)
    j10, j11, j12 = d(1, 0), d(1, 1), d(1, 2)
    j20, j21, j22 = d(2, 0), d(2, 1), d(2, 2)
    det = (j00 * (j11 * j22 - j12 * j21)
           - j01 * (j10 * j22 - j12 * j20)
           + j02 * (j10 * j21 - j11 * j20))
    return Volume(det.astype(np.float32), field.spacing, field.origin)


def invert_field(field: DisplacementField, iterations: int = 30,
                 ) -> DisplacementField:
    """Fixed-point numerical inverse: v <- -u(x + v(x)).

    Intended as an oracle for inverse-consistency tests, not as a substitute
    for running the registration in the reverse direction.
    """
    inv = DisplacementField.zeros(field.geometry)
    comp = [np.ascontiguousarray(field.u[..., c]) for c in range(3)]
    (nx, ny, nz), (sx, sy, sz), (ox, oy, oz) = field.geometry
    xs = ox + sx * np.arange(nx)
    ys = oy + sy * np.arange(ny)
    zs = oz + sz * np.arange(nz)
    for _ in range(iterations):
        px = xs[None, None, :] + inv.u[..., 0]
        py = ys[None, :, None] + inv.u[..., 1]
        pz = zs[:, None, None] + inv.u[..., 2]
        tx = np.clip((px - ox) / sx, 0, nx - 1)
        ty = np.clip((py - oy) / sy, 0, ny - 1)
        tz = np.clip((pz - oz) / sz, 0, nz - 1)
        from scipy.ndimage import map_coordinates
        for c in range(3):
            inv.u[..., c] = -map_coordinates(
                comp[c], [tz, ty, tx], order=1, mode="nearest"
            )
    return inv


@dataclass
class InverseConsistency:
    """Voxel map of ||T_bwd(T_fwd(x)) - x|| (mm) plus domain summaries."""

    error: Volume            # NaN outside the domain / for excluded voxels
    mean: float
    sd: float
    n_evaluated: int
    n_excluded: int          # mapped outside the floating center hull


def inverse_consistency(fwd: DisplacementField, bwd: DisplacementField,
                        domain: np.ndarray | None = None,
                        ) -> InverseConsistency:
    """Compose forward and backward transforms and measure the residual.

    ``fwd`` lives on the reference grid, ``bwd`` on the floating grid.  The
    backward displacement is trilinearly interpolated at the forward-mapped
    point; reference voxels mapping outside the floating center hull are
    excluded from the summary and counted.
    """
    (nx, ny, nz), (sx, sy, sz), (ox, oy, oz) = fwd.geometry
    if domain is None:
        domain = np.ones(fwd.u.shape[:3], dtype=bool)
    else:
        domain = np.asarray(domain, dtype=bool)
        if domain.shape != fwd.u.shape[:3]:
            raise GeometryError("domain shape does not match forward field")

    xs = ox + sx * np.arange(nx)
    ys = oy + sy * np.arange(ny)
    zs = oz + sz * np.arange(nz)
    px = xs[None, None, :] + fwd.u[..., 0]
    py = ys[None, :, None] + fwd.u[..., 1]
    pz = zs[:, None, None] + fwd.u[..., 2]

    (fnx, fny, fnz), (fsx, fsy, fsz), (fox, foy, foz) = bwd.geometry
    tx = (px - fox) / fsx
    ty = (py - foy) / fsy
    tz = (pz - foz) / fsz
    inside = ((tx >= 0) & (tx <= fnx - 1) & (ty >= 0) & (ty <= fny - 1)
              & (tz >= 0) & (tz <= fnz - 1))

    from scipy.ndimage import map_coordinates
    coords = [np.clip(tz, 0, fnz - 1), np.clip(ty, 0, fny - 1),
              np.clip(tx, 0, fnx - 1)]
    bx = map_coordinates(np.ascontiguousarray(bwd.u[..., 0]), coords, order=1)
    by = map_coordinates(np.ascontiguousarray(bwd.u[..., 1]), coords, order=1)
    bz = map_coordinates(np.ascontiguousarray(bwd.u[..., 2]), coords, order=1)

    err = np.sqrt((px + bx - xs[None, None, :]) ** 2
                  + (py + by - ys[None, :, None]) ** 2
                  + (pz + bz - zs[:, None, None]) ** 2)

    evaluated = domain & inside
    n_excluded = int((domain & ~inside).sum())
    out = np.full(err.shape, np.nan, dtype=np.float32)
    out[evaluated] = err[evaluated].astype(np.float32)
    vals = err[evaluated]
    mean = float(vals.mean()) if vals.size else float("nan")
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return InverseConsistency(
        error=Volume(out, fwd.spacing, fwd.origin),
        mean=mean, sd=sd,
        n_evaluated=int(vals.size), n_excluded=n_excluded,
    )


class StreamingMoments:
    """Welford accumulation of per-voxel mean and SD over a volume stream."""

    def __init__(self):
        self.n = 0
        self._geometry = None
        self._spacing = None
        self._origin = None
        self._mean = None
        self._m2 = None

    def add(self, v: Volume):
        vals = v.values.astype(np.float64)
        if self.n == 0:
            self._geometry = v.geometry
            self._spacing = v.spacing
            self._origin = v.origin
            self._mean = np.zeros_like(vals)
            self._m2 = np.zeros_like(vals)
        elif v.geometry != self._geometry:
            raise GeometryError("streamed volumes must share geometry")
        self.n += 1
        delta = vals - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (vals - self._mean)

    def mean(self) -> Volume:
        if self.n == 0:
            raise ValueError("no volumes accumulated")
        return Volume(self._mean.astype(np.float32), self._spacing,
                      self._origin)

    def sd(self) -> Volume:
        """Sample SD (n-1 denominator); a single volume yields SD 0."""
        if self.n == 0:
            raise ValueError("no volumes accumulated")
        if self.n == 1:
            out = np.zeros_like(self._m2)
        else:
            out = np.sqrt(np.maximum(self._m2, 0.0) / (self.n - 1))
        return Volume(out.astype(np.float32), self._spacing, self._origin)


@dataclass
class AggregateMaps:
    hu_mean: Volume
    hu_sd: Volume
    jd_mean: Volume
    jd_sd: Volume
    ice_mean: Volume | None = None


def cohort_aggregates(warped_hu, jd, ice=None) -> AggregateMaps:
    """Single-pass voxel-wise mean/SD maps over streams of cohort volumes."""
    hu_m = StreamingMoments()
    jd_m = StreamingMoments()
    for v in warped_hu:
        hu_m.add(v)
    for v in jd:
        jd_m.add(v)
    ice_mean = None
    if ice is not None:
        ice_m = StreamingMoments()
        for v in ice:
            ice_m.add(v)
        if ice_m.n:
            ice_mean = ice_m.mean()
    return AggregateMaps(
        hu_mean=hu_m.mean(), hu_sd=hu_m.sd(),
        jd_mean=jd_m.mean(), jd_sd=jd_m.sd(),
        ice_mean=ice_mean,
    )
