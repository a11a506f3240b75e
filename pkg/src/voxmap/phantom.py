"""Synthetic cardiac phantom cohorts with exact masks and known deformations.

The tissue model is geometric: four chamber ellipsoids, a myocardial shell,
an aorta tube, lung slabs, a liver blob, and a fat shell inside a
soft-tissue body.  Per subject, a global affine (scale+shift about the
domain center) composes with a band-limited sinusoidal warp, both applied
analytically when testing voxel membership, so the written masks are exact.
Planted effects scale region radii (volume channel) or offset tissue means
(density channel) as linear functions of age; independent volume jitter
decouples a region's size from age.

Tissue HU values straddle the preprocessing clip range on purpose
(contrast blood ~300, myocardium ~50, fat ~-100, lungs ~-800).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .manifest import CohortManifest, SubjectRecord, write_manifest
from .nifti import write_volume
from .volume import LabelVolume, Volume

# region ids in the rasterized map
BODY, LV, RV, LA, RA, MYO, AORTA, LUNGS, LIVER, FAT = range(10)
REGION_NAMES = {
    LV: "lv", RV: "rv", LA: "la", RA: "ra", MYO: "myo", AORTA: "aorta",
    LUNGS: "lungs", LIVER: "liver",
}
MASK_REGIONS = tuple(REGION_NAMES.values())
CHAMBER_REGIONS = ("lv", "rv", "la", "ra")
_REGION_ID = {v: k for k, v in REGION_NAMES.items()}

DENSITY_FEATURES = {
    "lv": "lvmd", "rv": "rvmd", "la": "lamd", "ra": "ramd",
    "myo": "mmd", "aorta": "aortamd",
}
VOLUME_FEATURES = {
    "lv": "lvv", "rv": "rvv", "la": "lav", "ra": "rav",
    "myo": "mv", "aorta": "av",
}


@dataclass
class PhantomSpec:
    """Canonical phantom geometry (normalized to the physical extent)."""

    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 20240101

    lv_center: tuple = (0.60, 0.55, 0.44)
    lv_radii: tuple = (0.165, 0.150, 0.175)
    myo_thickness: float = 0.105
    rv_center: tuple = (0.28, 0.54, 0.45)
    rv_radii: tuple = (0.135, 0.125, 0.150)
    la_center: tuple = (0.60, 0.50, 0.78)
    la_radii: tuple = (0.135, 0.120, 0.130)
    ra_center: tuple = (0.30, 0.52, 0.75)
    ra_radii: tuple = (0.125, 0.115, 0.125)
    aorta_axis: tuple = (0.52, 0.27)
    aorta_radius: float = 0.075
    aorta_z: tuple = (0.40, 0.95)
    # papillary blob: myocardial tissue inside the LV blood pool; excluded
    # from the LV mask like real papillary muscles, so jittering its size
    # varies LVV while the LV outer surface (and bounding box) stay fixed
    papilla_offset: tuple = (-0.30, 0.12, -0.18)   # fractions of LV radii
    papilla_radii: tuple = (0.42, 0.40, 0.44)      # fractions of LV radii
    fat_center: tuple = (0.46, 0.49, 0.58)
    fat_outer: tuple = (0.42, 0.40, 0.40)
    fat_inner: tuple = (0.37, 0.35, 0.35)
    # lungs wrap the whole domain as a box shell of this normalized
    # thickness: high-contrast anchors at every face after organ removal,
    # and the shell is region-filtered out of association maps
    lung_margin: float = 0.06
    liver_center: tuple = (0.50, 0.75, 0.07)
    liver_radii: tuple = (0.32, 0.20, 0.09)

    # per-tissue (mean HU, noise SD)
    densities: dict = field(default_factory=lambda: {
        BODY: (30.0, 12.0), LV: (300.0, 15.0), RV: (300.0, 15.0),
        LA: (300.0, 15.0), RA: (300.0, 15.0), MYO: (50.0, 12.0),
        AORTA: (280.0, 15.0), LUNGS: (-800.0, 25.0), LIVER: (60.0, 12.0),
        FAT: (-100.0, 12.0),
    })
    # amplitude (HU) of the canonical material texture per tissue; the
    # texture is a fixed feature of the model, so it deforms with each
    # subject and gives the intensity channel structure to match
    texture_amplitudes: dict = field(default_factory=lambda: {
        BODY: 30.0, FAT: 20.0, LIVER: 20.0, MYO: 12.0, LUNGS: 15.0,
        LV: 6.0, RV: 6.0, LA: 6.0, RA: 6.0, AORTA: 6.0,
    })
    texture_wavelengths: tuple = (0.10, 0.16, 0.24)  # fractions of extent

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(
            self.spacing)

    def analytic_volumes(self) -> dict[str, float]:
        """Closed-form region volumes (mm^3) of the canonical phantom.

        The LV volume subtracts the papillary blob, which lies strictly
        inside the chamber.
        """
        ext = self.extent
        out = {}
        for name, (c, r) in {
            "lv": (self.lv_center, self.lv_radii),
            "rv": (self.rv_center, self.rv_radii),
            "la": (self.la_center, self.la_radii),
            "ra": (self.ra_center, self.ra_radii),
        }.items():
            rr = np.asarray(r) * ext
            out[name] = 4.0 / 3.0 * math.pi * rr[0] * rr[1] * rr[2]
        pap_r = np.asarray(self.papilla_radii) * np.asarray(self.lv_radii) \
            * ext
        out["lv"] -= 4.0 / 3.0 * math.pi * pap_r[0] * pap_r[1] * pap_r[2]
        return out


@dataclass
class PlantedEffect:
    """A linear-in-age effect on a region's volume or density.

    Volume slopes are fractional per year when ``relative`` else mL/year;
    density slopes are HU/year.  ``noise_sd`` adds subject-level jitter in
    the same units as the planted value.
    """

    region: str
    channel: str              # "volume" | "density"
    slope_per_year: float
    relative: bool = True
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.region not in MASK_REGIONS:
            raise ValueError(f"unknown region '{self.region}'")
        if self.channel not in ("volume", "density"):
            raise ValueError(f"unknown channel '{self.channel}'")


@dataclass
class CohortSpec:
    n: int = 20
    seed: int = 7
    sex: str = "mixed"                     # female | male | mixed
    age_range: tuple[float, float] = (50.0, 65.0)
    deformation_amplitude: float = 4.0     # mm, total across modes
    deformation_wavelengths: tuple = (96.0, 48.0)   # mm, band limit
    global_scale_jitter: float = 0.04      # uniform +- fractional
    global_shift_jitter: float = 3.0       # mm, uniform +- per axis
    effects: list = field(default_factory=list)
    volume_jitter: dict = field(default_factory=dict)  # region -> +-fraction
    # (lo, hi): per-subject uniform scale factor on the papillary blob
    # radii; varies LVV with no effect outside the LV at all
    papillary_jitter: tuple | None = None
    # chamber -> (p_lo, p_hi): per-subject superquadric exponent drawn
    # uniformly; varies the region's volume while its bounding box stays
    # fixed (so bounding-box affine initialization is unaffected)
    shape_jitter: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("cohort size must be >= 0")
        if self.sex not in ("female", "male", "mixed"):
            raise ValueError(f"invalid sex '{self.sex}'")
        for region in self.volume_jitter:
            if region not in MASK_REGIONS:
                raise ValueError(f"unknown region '{region}' in volume_jitter")
        for region, (lo, hi) in self.shape_jitter.items():
            if region not in CHAMBER_REGIONS:
                raise ValueError(
                    f"shape_jitter only applies to chambers, got '{region}'")
            if not (1.2 <= lo <= hi <= 6.0):
                raise ValueError(
                    f"shape exponent range must lie in [1.2, 6], got "
                    f"({lo}, {hi})")


@dataclass
class SubjectTruth:
    subject_id: str
    sex: str
    age: float
    seed: int
    region_volumes_ml: dict[str, float]      # measured from exact masks
    region_densities: dict[str, float]       # mean HU within exact masks
    planted: dict[str, float]                # e.g. lv_volume_factor, myo_hu
    warp_params: dict                        # amp/k/phase arrays
    affine: dict                             # scale s, shift (tx, ty, tz)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _rasterize(nx, ny, nz, sx, sy, sz, ox, oy, oz,
               inv_scale, ccx, ccy, ccz, tx, ty, tz,
               bcx, bcy, bcz, bw, bax, bay, baz,
               tkx, tky, tkz, tpx, tpy, tpz,
               chambers, papilla, myo_outer, aorta, lung_box, liver,
               fat_outer, fat_inner):
    out = np.empty((nz, ny, nx), dtype=np.int32)
    tex = np.empty((nz, ny, nx), dtype=np.float32)
    n_bumps = bcx.shape[0]
    n_tex = tkx.shape[0]
    for k in range(nz):
        pz = oz + k * sz
        for j in range(ny):
            py = oy + j * sy
            for i in range(nx):
                px = ox + i * sx
                # global affine: subject -> canonical
                yx = (px - tx - ccx) * inv_scale + ccx
                yy = (py - ty - ccy) * inv_scale + ccy
                yz = (pz - tz - ccz) * inv_scale + ccz
                # localized warp bumps, evaluated in canonical coordinates
                bx = 0.0
                by = 0.0
                bz = 0.0
                for m in range(n_bumps):
                    dx = yx - bcx[m]
                    dy = yy - bcy[m]
                    dz = yz - bcz[m]
                    d2 = (dx * dx + dy * dy + dz * dz) / (2.0 * bw[m]
                                                          * bw[m])
                    if d2 < 12.0:
                        g = np.exp(-d2)
                        bx += bax[m] * g
                        by += bay[m] * g
                        bz += baz[m] * g
                yx += bx
                yy += by
                yz += bz
                # canonical material texture at the warped point
                tval = 0.0
                for m in range(n_tex):
                    tval += np.sin(tkx[m] * yx + tpx[m]) \
                        * np.sin(tky[m] * yy + tpy[m]) \
                        * np.sin(tkz[m] * yz + tpz[m])
                tex[k, j, i] = tval / n_tex

                label = BODY
                hit = False
                # papillary blob wins over the LV blood pool
                dxp = abs(yx - papilla[0]) / papilla[3]
                dyp = abs(yy - papilla[1]) / papilla[4]
                dzp = abs(yz - papilla[2]) / papilla[5]
                if papilla[3] > 0.0 and dxp * dxp + dyp * dyp + dzp * dzp \
                        <= 1.0:
                    label = MYO
                    hit = True
                for c in range(4):
                    if hit:
                        break
                    dx = abs(yx - chambers[c, 0]) / chambers[c, 3]
                    dy = abs(yy - chambers[c, 1]) / chambers[c, 4]
                    dz = abs(yz - chambers[c, 2]) / chambers[c, 5]
                    p = chambers[c, 6]
                    if p == 2.0:
                        inside = dx * dx + dy * dy + dz * dz <= 1.0
                    else:
                        inside = dx ** p + dy ** p + dz ** p <= 1.0
                    if inside:
                        label = LV + c
                        hit = True
                        break
                if not hit:
                    dax = yx - aorta[0]
                    day = yy - aorta[1]
                    if (dax * dax + day * day <= aorta[2] * aorta[2]
                            and aorta[3] <= yz <= aorta[4]):
                        label = AORTA
                        hit = True
                if not hit:
                    dx = abs(yx - myo_outer[0]) / myo_outer[3]
                    dy = abs(yy - myo_outer[1]) / myo_outer[4]
                    dz = abs(yz - myo_outer[2]) / myo_outer[5]
                    p = myo_outer[6]
                    if p == 2.0:
                        inside = dx * dx + dy * dy + dz * dz <= 1.0
                    else:
                        inside = dx ** p + dy ** p + dz ** p <= 1.0
                    if inside:
                        label = MYO
                        hit = True
                if not hit and (
                        yx < lung_box[0] or yx > lung_box[1]
                        or yy < lung_box[2] or yy > lung_box[3]
                        or yz < lung_box[4] or yz > lung_box[5]):
                    label = LUNGS
                    hit = True
                if not hit:
                    dx = (yx - liver[0]) / liver[3]
                    dy = (yy - liver[1]) / liver[4]
                    dz = (yz - liver[2]) / liver[5]
                    if dx * dx + dy * dy + dz * dz <= 1.0:
                        label = LIVER
                        hit = True
                if not hit:
                    dx = (yx - fat_outer[0]) / fat_outer[3]
                    dy = (yy - fat_outer[1]) / fat_outer[4]
                    dz = (yz - fat_outer[2]) / fat_outer[5]
                    if dx * dx + dy * dy + dz * dz <= 1.0:
                        ex = (yx - fat_inner[0]) / fat_inner[3]
                        ey = (yy - fat_inner[1]) / fat_inner[4]
                        ez = (yz - fat_inner[2]) / fat_inner[5]
                        if ex * ex + ey * ey + ez * ez > 1.0:
                            label = FAT
                out[k, j, i] = label
    return out, tex


@njit(cache=True, nogil=True)
def _min_warp_jacobian(nx, ny, nz, sx, sy, sz, ox, oy, oz,
                       bcx, bcy, bcz, bw, bax, bay, baz):
    """Minimum of det(I + grad b) over voxel centers (analytic gradient)."""
    n_bumps = bcx.shape[0]
    best = np.inf
    for k in range(nz):
        yz = oz + k * sz
        for j in range(ny):
            yy = oy + j * sy
            for i in range(nx):
                yx = ox + i * sx
                g = np.zeros((3, 3))
                for m in range(n_bumps):
                    dx = yx - bcx[m]
                    dy = yy - bcy[m]
                    dz = yz - bcz[m]
                    w2 = bw[m] * bw[m]
                    d2 = (dx * dx + dy * dy + dz * dz) / (2.0 * w2)
                    if d2 >= 12.0:
                        continue
                    e = np.exp(-d2)
                    # d/dx_j of a_c exp(-|y-c|^2 / 2w^2)
                    g[0, 0] += bax[m] * e * (-dx / w2)
                    g[0, 1] += bax[m] * e * (-dy / w2)
                    g[0, 2] += bax[m] * e * (-dz / w2)
                    g[1, 0] += bay[m] * e * (-dx / w2)
                    g[1, 1] += bay[m] * e * (-dy / w2)
                    g[1, 2] += bay[m] * e * (-dz / w2)
                    g[2, 0] += baz[m] * e * (-dx / w2)
                    g[2, 1] += baz[m] * e * (-dy / w2)
                    g[2, 2] += baz[m] * e * (-dz / w2)
                det = ((1.0 + g[0, 0]) * ((1.0 + g[1, 1]) * (1.0 + g[2, 2])
                                          - g[1, 2] * g[2, 1])
                       - g[0, 1] * (g[1, 0] * (1.0 + g[2, 2])
                                    - g[1, 2] * g[2, 0])
                       + g[0, 2] * (g[1, 0] * g[2, 1]
                                    - (1.0 + g[1, 1]) * g[2, 0]))
                if det < best:
                    best = det
    return best


# ---------------------------------------------------------------------------
# Subject assembly
# ---------------------------------------------------------------------------

def _ellipsoid_array(center, radii, ext, origin, factor=1.0,
                     exponent=2.0) -> np.ndarray:
    c = np.asarray(origin) + np.asarray(center) * ext
    r = np.asarray(radii) * ext * factor
    return np.array([c[0], c[1], c[2], r[0], r[1], r[2], exponent],
                    dtype=np.float64)


def _spec_geometry(spec: PhantomSpec, factors: dict[str, float],
                   exponents: dict[str, float] | None = None):
    ext = spec.extent
    org = np.asarray(spec.origin, dtype=np.float64)
    exponents = exponents or {}

    def f(region):
        return factors.get(region, 1.0)

    def p(region):
        return exponents.get(region, 2.0)

    chambers = np.stack([
        _ellipsoid_array(spec.lv_center, spec.lv_radii, ext, org, f("lv"),
                         p("lv")),
        _ellipsoid_array(spec.rv_center, spec.rv_radii, ext, org, f("rv"),
                         p("rv")),
        _ellipsoid_array(spec.la_center, spec.la_radii, ext, org, f("la"),
                         p("la")),
        _ellipsoid_array(spec.ra_center, spec.ra_radii, ext, org, f("ra"),
                         p("ra")),
    ])
    # myocardial shell follows the (scaled) LV with constant thickness and
    # the same shape exponent
    lv_r = np.asarray(spec.lv_radii) * ext * f("lv")
    myo_r = (lv_r + spec.myo_thickness * ext * f("myo")) / ext
    myo_outer = _ellipsoid_array(spec.lv_center, tuple(myo_r), ext, org,
                                 exponent=p("lv"))
    pap_factor = factors.get("papilla", 1.0)
    lv_c = org + np.asarray(spec.lv_center) * ext
    pap_c = lv_c + np.asarray(spec.papilla_offset) * lv_r
    pap_r = np.asarray(spec.papilla_radii) * lv_r * pap_factor
    papilla = np.array([pap_c[0], pap_c[1], pap_c[2],
                        pap_r[0], pap_r[1], pap_r[2], 2.0],
                       dtype=np.float64)
    aorta = np.array([
        org[0] + spec.aorta_axis[0] * ext[0],
        org[1] + spec.aorta_axis[1] * ext[1],
        spec.aorta_radius * ext.min() * f("aorta"),
        org[2] + spec.aorta_z[0] * ext[2],
        org[2] + spec.aorta_z[1] * ext[2],
    ], dtype=np.float64)
    m = spec.lung_margin
    lung_box = np.array([
        org[0] + m * ext[0], org[0] + (1 - m) * ext[0],
        org[1] + m * ext[1], org[1] + (1 - m) * ext[1],
        org[2] + m * ext[2], org[2] + (1 - m) * ext[2],
    ], dtype=np.float64)
    liver = _ellipsoid_array(spec.liver_center, spec.liver_radii, ext, org)
    fat_outer = _ellipsoid_array(spec.fat_center, spec.fat_outer, ext, org)
    fat_inner = _ellipsoid_array(spec.fat_center, spec.fat_inner, ext, org)
    return chambers, papilla, myo_outer, aorta, lung_box, liver, fat_outer, fat_inner


def _zero_warp():
    zeros = np.zeros(0, dtype=np.float64)
    return dict(cx=zeros.copy(), cy=zeros.copy(), cz=zeros.copy(),
                w=zeros.copy(), ax=zeros.copy(), ay=zeros.copy(),
                az=zeros.copy())


def warp_displacement(points: np.ndarray, warp_params: dict) -> np.ndarray:
    """Evaluate the analytic warp b(y) at canonical points (N, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(pts)
    cx, cy, cz = (warp_params[k] for k in ("cx", "cy", "cz"))
    w = warp_params["w"]
    for m in range(cx.size):
        d2 = ((pts[:, 0] - cx[m]) ** 2 + (pts[:, 1] - cy[m]) ** 2
              + (pts[:, 2] - cz[m]) ** 2) / (2.0 * w[m] * w[m])
        g = np.exp(-d2)
        out[:, 0] += warp_params["ax"][m] * g
        out[:, 1] += warp_params["ay"][m] * g
        out[:, 2] += warp_params["az"][m] * g
    return out


def _draw_warp(rng: np.random.Generator, amplitude: float, wavelengths,
               spec: PhantomSpec) -> dict:
    """Random field of localized Gaussian displacement bumps.

    Each wavelength contributes bumps of that FWHM scattered over the
    domain, so the deformation decorrelates with distance instead of being
    a few global modes.  Amplitudes are normalized so the peak displacement
    magnitude equals ``amplitude``; the analytic Jacobian is kept safely
    positive by rescaling if needed.
    """
    wavelengths = tuple(float(x) for x in wavelengths)
    if amplitude <= 0 or not wavelengths:
        return _zero_warp()
    ext = spec.extent
    org = np.asarray(spec.origin, dtype=np.float64)
    centers = []
    widths = []
    for lam in wavelengths:
        sigma = lam / 2.355  # FWHM -> gaussian width
        count = int(np.clip(round(3.0 * float(np.prod(ext)) / lam ** 3),
                            8, 420))
        pos = org + rng.uniform(0.0, 1.0, (count, 3)) * ext
        centers.append(pos)
        widths.append(np.full(count, sigma))
    centers = np.concatenate(centers)
    widths = np.concatenate(widths)
    n = widths.size
    amps = rng.normal(0.0, 1.0, (n, 3)) * widths[:, None] / widths.max()
    params = dict(
        cx=np.ascontiguousarray(centers[:, 0]),
        cy=np.ascontiguousarray(centers[:, 1]),
        cz=np.ascontiguousarray(centers[:, 2]),
        w=np.ascontiguousarray(widths),
        ax=np.ascontiguousarray(amps[:, 0]),
        ay=np.ascontiguousarray(amps[:, 1]),
        az=np.ascontiguousarray(amps[:, 2]),
    )
    # normalize the peak |b| to the requested amplitude
    nx, ny, nz = spec.dims
    stride = max(1, min(nx, ny, nz) // 32)
    xs = org[0] + spec.spacing[0] * np.arange(0, nx, stride)
    ys = org[1] + spec.spacing[1] * np.arange(0, ny, stride)
    zs = org[2] + spec.spacing[2] * np.arange(0, nz, stride)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    peak = float(np.linalg.norm(warp_displacement(pts, params),
                                axis=1).max())
    if peak > 0:
        factor = amplitude / peak
        for key in ("ax", "ay", "az"):
            params[key] = params[key] * factor
    # guarantee an invertible analytic map
    for _ in range(8):
        if min_warp_jacobian(spec, params) > 0.2:
            break
        for key in ("ax", "ay", "az"):
            params[key] = params[key] * 0.8
    return params


def _texture_modes(spec: PhantomSpec):
    """Fixed canonical texture modes, derived from the phantom seed only."""
    rng = np.random.default_rng(spec.seed ^ 0x7E57)
    ext = float(spec.extent.min())
    n = len(spec.texture_wavelengths)
    tk = np.empty((3, n))
    tp = rng.uniform(0, 2 * math.pi, (3, n))
    for m, frac in enumerate(spec.texture_wavelengths):
        k0 = 2.0 * math.pi / (frac * ext)
        tk[:, m] = k0 * rng.uniform(0.7, 1.0, 3)
    return tk, tp


def _render(spec: PhantomSpec, factors: dict[str, float], warp: dict,
            inv_scale: float, shift, rng: np.random.Generator,
            density_offsets: dict[int, float] | None = None,
            exponents: dict[str, float] | None = None):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.origin
    ext = spec.extent
    center = np.asarray(spec.origin) + ext / 2.0
    geo = _spec_geometry(spec, factors, exponents)
    tk, tp = _texture_modes(spec)
    regions, tex = _rasterize(
        nx, ny, nz, sx, sy, sz, ox, oy, oz,
        inv_scale, center[0], center[1], center[2],
        shift[0], shift[1], shift[2],
        warp["cx"], warp["cy"], warp["cz"], warp["w"],
        warp["ax"], warp["ay"], warp["az"],
        np.ascontiguousarray(tk[0]), np.ascontiguousarray(tk[1]),
        np.ascontiguousarray(tk[2]),
        np.ascontiguousarray(tp[0]), np.ascontiguousarray(tp[1]),
        np.ascontiguousarray(tp[2]),
        *geo,
    )
    hu = np.zeros(16, dtype=np.float32)
    sd = np.zeros(16, dtype=np.float32)
    ta = np.zeros(16, dtype=np.float32)
    for tid, (mean, noise) in spec.densities.items():
        hu[tid] = mean
        sd[tid] = noise
    for tid, t_amp in spec.texture_amplitudes.items():
        ta[tid] = t_amp
    if density_offsets:
        for tid, off in density_offsets.items():
            hu[tid] += off
    image = (hu[regions] + ta[regions] * tex
             + sd[regions] * rng.standard_normal(
                 regions.shape).astype(np.float32))
    img_vol = Volume(image, spec.spacing, spec.origin)
    masks = {
        name: LabelVolume((regions == rid).astype(np.int32),
                          spec.spacing, spec.origin)
        for rid, name in REGION_NAMES.items()
    }
    return img_vol, masks, regions


def generate_phantom(spec: PhantomSpec):
    """Rasterize the canonical phantom (no deformation, no planted effects).

    Returns (image, masks, ground_truth) where ground_truth holds analytic
    ellipsoid volumes and the rasterized voxel counts.
    """
    rng = np.random.default_rng(spec.seed)
    image, masks, regions = _render(
        spec, {}, _zero_warp(), 1.0, (0.0, 0.0, 0.0), rng
    )
    voxel_ml = float(np.prod(spec.spacing)) / 1000.0
    truth = {
        "analytic_volumes_mm3": spec.analytic_volumes(),
        "rasterized_volumes_mm3": {
            name: float((regions == rid).sum()) * float(np.prod(spec.spacing))
            for rid, name in REGION_NAMES.items()
        },
        "voxel_volume_ml": voxel_ml,
    }
    return image, masks, truth


def generate_subject(spec: PhantomSpec, cohort: CohortSpec, subject_id: str,
                     sex: str, age: float, seed: int):
    """Render one cohort subject with its planted effects and random warp."""
    rng = np.random.default_rng(seed)
    age_mid = 0.5 * (cohort.age_range[0] + cohort.age_range[1])
    d_age = age - age_mid

    factors: dict[str, float] = {}
    density_offsets: dict[int, float] = {}
    planted: dict[str, float] = {}
    base_volumes = spec.analytic_volumes()
    for eff in cohort.effects:
        jitter = rng.normal(0.0, eff.noise_sd) if eff.noise_sd > 0 else 0.0
        if eff.channel == "volume":
            if eff.relative:
                frac = 1.0 + eff.slope_per_year * d_age + jitter
            else:
                base_ml = base_volumes.get(eff.region, 0.0) / 1000.0
                if base_ml <= 0:
                    raise ValueError(
                        f"absolute volume effect needs an ellipsoid region, "
                        f"got '{eff.region}'"
                    )
                frac = (base_ml + eff.slope_per_year * d_age + jitter) / base_ml
            frac = max(0.2, frac)
            factors[eff.region] = factors.get(eff.region, 1.0) \
                * float(np.cbrt(frac))
            planted[f"{eff.region}_volume_factor"] = \
                factors[eff.region] ** 3
        else:
            off = eff.slope_per_year * d_age + jitter
            density_offsets[_REGION_ID[eff.region]] = \
                density_offsets.get(_REGION_ID[eff.region], 0.0) + off
            planted[f"{eff.region}_hu_offset"] = \
                density_offsets[_REGION_ID[eff.region]]
    for region, jit in cohort.volume_jitter.items():
        frac = 1.0 + rng.uniform(-jit, jit)
        factors[region] = factors.get(region, 1.0) * float(np.cbrt(frac))
        planted[f"{region}_volume_factor"] = factors[region] ** 3
    exponents: dict[str, float] = {}
    for region, (p_lo, p_hi) in cohort.shape_jitter.items():
        exponents[region] = float(rng.uniform(p_lo, p_hi))
        planted[f"{region}_shape_exponent"] = exponents[region]
    if cohort.papillary_jitter is not None:
        lo, hi = cohort.papillary_jitter
        factors["papilla"] = float(rng.uniform(lo, hi))
        planted["papilla_factor"] = factors["papilla"]

    scale = 1.0 + rng.uniform(-cohort.global_scale_jitter,
                              cohort.global_scale_jitter)
    shift = tuple(rng.uniform(-cohort.global_shift_jitter,
                              cohort.global_shift_jitter) for _ in range(3))
    warp = _draw_warp(rng, cohort.deformation_amplitude,
                      cohort.deformation_wavelengths, spec)

    image, masks, regions = _render(
        spec, factors, warp, 1.0 / scale, shift, rng, density_offsets,
        exponents
    )

    voxel_mm3 = float(np.prod(spec.spacing))
    volumes_ml = {
        name: float((regions == rid).sum()) * voxel_mm3 / 1000.0
        for rid, name in REGION_NAMES.items()
    }
    densities = {}
    for rid, name in REGION_NAMES.items():
        sel = regions == rid
        densities[name] = float(image.values[sel].mean()) if sel.any() \
            else float("nan")

    truth = SubjectTruth(
        subject_id=subject_id, sex=sex, age=age, seed=seed,
        region_volumes_ml=volumes_ml, region_densities=densities,
        planted=planted, warp_params=warp,
        affine={"scale": scale, "shift": shift},
    )
    return image, masks, truth


def min_warp_jacobian(spec: PhantomSpec, warp: dict) -> float:
    """Minimum analytic det(I + grad b) over the voxel centers."""
    nx, ny, nz = spec.dims
    return float(_min_warp_jacobian(
        nx, ny, nz, *spec.spacing, *spec.origin,
        warp["cx"], warp["cy"], warp["cz"], warp["w"],
        warp["ax"], warp["ay"], warp["az"],
    ))


def generate_cohort(spec: PhantomSpec, cohort: CohortSpec, out_dir,
                    write_files: bool = True):
    """Generate a cohort: images, exact masks, manifest, ground truth.

    Returns (manifest, truths).  With ``write_files``, per-subject NIfTI
    files land under ``out_dir/<subject>/`` and the manifest plus a
    ground-truth CSV at the top level.
    """
    out_dir = Path(out_dir)
    root_seq = np.random.SeedSequence(cohort.seed)
    subject_seeds = [int(s.generate_state(1)[0])
                     for s in root_seq.spawn(max(cohort.n, 1))]
    rng = np.random.default_rng(root_seq.spawn(1)[0])

    records = []
    truths = []
    for idx in range(cohort.n):
        sid = f"sub{idx:03d}"
        if cohort.sex == "mixed":
            sex = "female" if idx % 2 == 0 else "male"
        else:
            sex = cohort.sex
        months = rng.integers(
            round(cohort.age_range[0] * 12), round(cohort.age_range[1] * 12)
        )
        age = float(months) / 12.0
        image, masks, truth = generate_subject(
            spec, cohort, sid, sex, age, subject_seeds[idx]
        )
        truths.append(truth)

        cov = {"age": age}
        for region, feat in VOLUME_FEATURES.items():
            cov[feat] = round(truth.region_volumes_ml[region], 6)
        for region, feat in DENSITY_FEATURES.items():
            cov[feat] = round(truth.region_densities[region], 6)

        rel_img = f"{sid}/image.nii.gz"
        rel_masks = {r: f"{sid}/mask_{r}.nii.gz" for r in MASK_REGIONS}
        if write_files:
            sub_dir = out_dir / sid
            sub_dir.mkdir(parents=True, exist_ok=True)
            write_volume(image, out_dir / rel_img)
            for r in MASK_REGIONS:
                write_volume(masks[r], out_dir / rel_masks[r])
        records.append(SubjectRecord(
            id=sid, sex=sex, covariates=cov, image=rel_img, masks=rel_masks,
        ))

    man = CohortManifest(records)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(man, out_dir / "manifest.csv")
        _write_truth_csv(truths, out_dir / "groundtruth.csv")
    return man, truths


def _write_truth_csv(truths: list[SubjectTruth], path: Path):
    import csv
    regions = list(MASK_REGIONS)
    planted_keys = sorted({k for t in truths for k in t.planted})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "sex", "age", "seed"]
            + [f"vol_ml_{r}" for r in regions]
            + [f"hu_{r}" for r in regions]
            + planted_keys
        )
        for t in truths:
            writer.writerow(
                [t.subject_id, t.sex, f"{t.age:.6f}", t.seed]
                + [f"{t.region_volumes_ml[r]:.6f}" for r in regions]
                + [f"{t.region_densities[r]:.4f}" for r in regions]
                + [f"{t.planted.get(k, float('nan')):.8g}"
                   for k in planted_keys]
            )
