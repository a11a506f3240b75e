"""Two-stage multi-channel deformable registration driven by graph cuts.

A floating subject is aligned to a reference subject in three steps:

1. closed-form affine initialization matching the axis-aligned bounding
   boxes of the left-ventricle masks (anchored at the box centers so the
   reference box maps exactly onto the floating box);
2. a coarse-to-fine stage with strong regularization and small optimization
   blocks;
3. a second coarse-to-fine stage with weak regularization and large blocks,
   warm-started from the first stage's field.

Per pyramid level, binary move-making sweeps propose one-voxel steps along
each axis; every block subproblem is solved exactly by max-flow and applied
only when the energy strictly decreases, so the total energy is
non-increasing across block solves by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .preprocess import PreprocessedSubject
from .volume import (BoundingBox, GeometryError, LabelVolume, Volume,
                     check_same_geometry, gaussian_downsample, same_geometry)

CONVERGENCE_REL = 1e-5


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineInit:
    """Anisotropic scale + translation, T(x) = S x + t (mm)."""

    scale: tuple[float, float, float]
    translation: tuple[float, float, float]

    def __post_init__(self):
        if any(not math.isfinite(s) or s <= 0 for s in self.scale):
            raise ValueError(f"scale must be finite and positive: {self.scale}")
        if any(not math.isfinite(t) for t in self.translation):
            raise ValueError(f"translation must be finite: {self.translation}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p * np.asarray(self.scale) + np.asarray(self.translation)

    @staticmethod
    def identity() -> "AffineInit":
        return AffineInit((1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


@dataclass
class DisplacementField:
    """Dense per-voxel displacement u (mm) on the reference grid.

    The total transform is T(x) = x + u(x), mapping reference space into
    floating space.  ``u`` has shape (nz, ny, nx, 3) with components in
    (x, y, z) order.
    """

    u: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[3] != 3:
            raise ValueError(f"field must be (nz, ny, nx, 3), got {self.u.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if not np.all(np.isfinite(self.u)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.u.shape[:3]
        return (nx, ny, nz)

    @property
    def geometry(self):
        return (self.dims, self.spacing, self.origin)

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.u.copy(), self.spacing, self.origin)

    @staticmethod
    def zeros(geometry) -> "DisplacementField":
        (nx, ny, nz), spacing, origin = geometry
        return DisplacementField(
            np.zeros((nz, ny, nx, 3), dtype=np.float64), spacing, origin
        )

    def resample_to(self, geometry) -> "DisplacementField":
        """Trilinearly resample onto another grid (clamped at borders).

        Vectors are physical, so no rescaling is needed; constant fields are
        preserved exactly.
        """
        (nx, ny, nz), spacing, origin = geometry
        u = _kernels.resample_field(
            self.u,
            self.origin[0], self.origin[1], self.origin[2],
            self.spacing[0], self.spacing[1], self.spacing[2],
            nx, ny, nz,
            origin[0], origin[1], origin[2],
            spacing[0], spacing[1], spacing[2],
        )
        return DisplacementField(u, spacing, origin)


@dataclass
class StageConfig:
    """One registration stage (defaults are stage-1 values)."""

    levels: int = 6
    block_size: int = 8
    regularization_weight: float = 2.0
    image_weight: float = 0.25
    mask_weights: tuple[float, float, float, float] = (1.0, 1.0, 0.3, 0.3)
    max_iterations: tuple[int, ...] = (300, 300, 300, 40, 20, 0)

    def __post_init__(self):
        self.mask_weights = tuple(float(w) for w in self.mask_weights)
        self.max_iterations = tuple(int(n) for n in self.max_iterations)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")
        if len(self.mask_weights) != 4:
            raise ValueError("mask_weights must have 4 entries")
        if len(self.max_iterations) != self.levels:
            raise ValueError(
                f"max_iterations needs {self.levels} entries "
                f"(coarsest to finest), got {len(self.max_iterations)}"
            )
        if any(n < 0 for n in self.max_iterations):
            raise ValueError("max_iterations entries must be >= 0")

    @staticmethod
    def from_dict(d: dict) -> "StageConfig":
        return StageConfig(
            levels=int(d.get("levels", 6)),
            block_size=int(d.get("block_size", 8)),
            regularization_weight=float(d.get("regularization_weight", 2.0)),
            image_weight=float(d.get("image_weight", 0.25)),
            mask_weights=tuple(d.get("mask_weights", (1.0, 1.0, 0.3, 0.3))),
            max_iterations=tuple(
                d.get("max_iterations", (300, 300, 300, 40, 20, 0))),
        )


def default_stage_configs() -> list[StageConfig]:
    """The published two-stage configuration."""
    stage1 = StageConfig()
    stage2 = StageConfig(
        levels=6,
        block_size=32,
        regularization_weight=0.15,
        image_weight=0.5,
        mask_weights=(1.0, 1.0, 0.1, 0.1),
        max_iterations=(300, 300, 300, 40, 20, 0),
    )
    return [stage1, stage2]


@dataclass(frozen=True)
class EnergyBreakdown:
    """Registration energy split into per-channel data terms + regularizer."""

    data_per_channel: tuple[float, ...]
    regularization: float

    @property
    def total(self) -> float:
        return float(sum(self.data_per_channel) + self.regularization)


@dataclass
class EnergyTrace:
    """Per-block-solve energy deltas plus running-vs-recomputed checkpoints."""

    block_deltas: list = dc_field(default_factory=list)
    checkpoints: list = dc_field(default_factory=list)

    def record_pass(self, deltas: np.ndarray):
        self.block_deltas.append(np.asarray(deltas, dtype=np.float64))

    def record_checkpoint(self, tag: str, running: float, full: float):
        self.checkpoints.append((tag, float(running), float(full)))

    @property
    def n_solves(self) -> int:
        return int(sum(d.size for d in self.block_deltas))

    @property
    def n_accepted(self) -> int:
        return int(sum((d < 0).sum() for d in self.block_deltas))

    def max_delta(self) -> float:
        if not self.block_deltas:
            return 0.0
        return float(max(d.max() if d.size else 0.0 for d in self.block_deltas))

    def max_checkpoint_error(self) -> float:
        err = 0.0
        for _, running, full in self.checkpoints:
            scale = max(1.0, abs(full))
            err = max(err, abs(running - full) / scale)
        return err


# ---------------------------------------------------------------------------
# Affine initialization
# ---------------------------------------------------------------------------

def bbox_affine_init(ref_box: BoundingBox, flt_box: BoundingBox) -> AffineInit:
    """Scale+shift mapping the reference LV box exactly onto the floating one.

    Per-axis scale is the extent ratio; the map is anchored at the box
    centers, T(x) = S (x - c_ref) + c_flt.
    """
    e_ref = ref_box.extent
    e_flt = flt_box.extent
    if np.any(e_ref <= 0) or np.any(e_flt <= 0):
        raise ValueError(
            f"degenerate bounding box: extents {tuple(e_ref)} / {tuple(e_flt)}"
        )
    scale = e_flt / e_ref
    translation = flt_box.center - scale * ref_box.center
    return AffineInit(tuple(scale), tuple(translation))


def affine_to_field(a: AffineInit, geometry) -> DisplacementField:
    """Sample u(x) = S x + t - x on the given reference grid."""
    (nx, ny, nz), spacing, origin = geometry
    xs = origin[0] + spacing[0] * np.arange(nx)
    ys = origin[1] + spacing[1] * np.arange(ny)
    zs = origin[2] + spacing[2] * np.arange(nz)
    u = np.empty((nz, ny, nx, 3), dtype=np.float64)
    u[:, :, :, 0] = (a.scale[0] - 1.0) * xs[None, None, :] + a.translation[0]
    u[:, :, :, 1] = (a.scale[1] - 1.0) * ys[None, :, None] + a.translation[1]
    u[:, :, :, 2] = (a.scale[2] - 1.0) * zs[:, None, None] + a.translation[2]
    return DisplacementField(u, spacing, origin)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def _as_channels(sub) -> tuple[Volume, ...]:
    if isinstance(sub, PreprocessedSubject):
        return sub.channels
    chans = tuple(sub)
    if len(chans) != 5:
        raise ValueError(f"expected 5 channels, got {len(chans)}")
    return chans


def _channel_arrays(chans):
    vols = [np.ascontiguousarray(c.values, dtype=np.float32) for c in chans]
    geo = chans[0]
    for c in chans[1:]:
        check_same_geometry(geo, c, "channels")
    return vols, geo.origin, geo.spacing, chans[0].fill()


def channel_energy(ref, flt, field: DisplacementField,
                   cfg: StageConfig) -> EnergyBreakdown:
    """Evaluate the registration energy of a field.

    Data terms: image-weighted sum of (1 - local NCC) over radius-2 windows
    (windows shifted rigidly by the voxel's displacement; windows with
    variance below 1e-12 contribute 0) plus weighted squared differences of
    the fuzzily warped mask channels.  Regularizer: squared difference of
    neighboring displacements over squared neighbor distance, scaled by the
    stage weight.
    """
    ref_chans = _as_channels(ref)
    flt_chans = _as_channels(flt)
    rvols, rorg, rsp, _ = _channel_arrays(ref_chans)
    fvols, forg, fsp, ffill = _channel_arrays(flt_chans)
    if field.dims != ref_chans[0].dims or \
            not same_geometry(field, ref_chans[0]):
        raise GeometryError(
            f"field geometry {field.geometry} does not match reference "
            f"channels {ref_chans[0].geometry}"
        )
    w = cfg.mask_weights
    sums = _kernels.data_cost_sums(
        rvols[0], rvols[1], rvols[2], rvols[3], rvols[4],
        fvols[0], fvols[1], fvols[2], fvols[3], fvols[4],
        rorg[0], rorg[1], rorg[2], rsp[0], rsp[1], rsp[2],
        forg[0], forg[1], forg[2], fsp[0], fsp[1], fsp[2],
        ffill, field.u,
        cfg.image_weight, w[0], w[1], w[2], w[3],
    )
    reg = cfg.regularization_weight * _kernels.reg_energy(
        field.u, rsp[0], rsp[1], rsp[2]
    )
    return EnergyBreakdown(tuple(float(s) for s in sums), float(reg))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

class _LevelOptimizer:
    """Move-making sweeps at one pyramid level, with cached cost maps.

    The per-voxel data cost under the current field and under each of the
    six candidate steps is cached; after a pass, only flipped voxels are
    refreshed.  Blocks run sequentially, so the result is deterministic.
    """

    def __init__(self, ref_chans, flt_chans, cfg: StageConfig,
                 field: DisplacementField, trace: EnergyTrace | None = None):
        self.cfg = cfg
        self.field = field
        self.trace = trace
        rvols, rorg, rsp, _ = _channel_arrays(ref_chans)
        fvols, forg, fsp, ffill = _channel_arrays(flt_chans)
        if not same_geometry(field, ref_chans[0]):
            raise GeometryError(
                f"field geometry {field.geometry} does not match level "
                f"geometry {ref_chans[0].geometry}"
            )
        self._vol_args = (
            rvols[0], rvols[1], rvols[2], rvols[3], rvols[4],
            fvols[0], fvols[1], fvols[2], fvols[3], fvols[4],
            rorg[0], rorg[1], rorg[2], rsp[0], rsp[1], rsp[2],
            forg[0], forg[1], forg[2], fsp[0], fsp[1], fsp[2],
            ffill,
        )
        w = cfg.mask_weights
        self._weights = (cfg.image_weight, w[0], w[1], w[2], w[3])
        self.rsp = rsp
        nx, ny, nz = field.dims
        self.shape = (nz, ny, nx)
        n = nx * ny * nz

        self.deltas = [
            (rsp[0], 0.0, 0.0), (-rsp[0], 0.0, 0.0),
            (0.0, rsp[1], 0.0), (0.0, -rsp[1], 0.0),
            (0.0, 0.0, rsp[2]), (0.0, 0.0, -rsp[2]),
        ]

        self.data_keep = np.empty(self.shape, dtype=np.float64)
        self._cost_map(self.data_keep, (0.0, 0.0, 0.0))
        self.data_move = [np.empty(self.shape, dtype=np.float64)
                          for _ in range(6)]
        for d, delta in enumerate(self.deltas):
            self._cost_map(self.data_move[d], delta)

        lam = cfg.regularization_weight
        self.energy = float(self.data_keep.sum()) + lam * float(
            _kernels.reg_energy(field.u, rsp[0], rsp[1], rsp[2])
        )

        # max-flow scratch, sized for the largest (clipped) block
        b = cfg.block_size
        bn = min(b, nx) * min(b, ny) * min(b, nz)
        n_arcs = 8 * bn + 16
        self._scratch = (
            np.empty(bn + 2, np.int32),       # ehead
            np.empty(n_arcs, np.int32),       # enxt
            np.empty(n_arcs, np.int32),       # eto
            np.empty(n_arcs, np.float64),     # ecap
            np.empty(bn + 2, np.int32),       # level
            np.empty(bn + 2, np.int32),       # itbuf
            np.empty(bn + 2, np.int32),       # queue
            np.empty(bn + 3, np.int32),       # stk_node
            np.empty(bn + 3, np.int32),       # stk_arc
            np.empty(bn, np.float64),         # c0buf
            np.empty(bn, np.float64),         # c1buf
            np.empty(bn + 2, np.uint8),       # nodelab
        )
        self._flip_out = np.empty(n, np.int64)

        def blocks_per_pass(off):
            cnt = 1
            for dim in (nx, ny, nz):
                cnt *= max(1, math.ceil((dim + off) / b))
            return cnt
        self._block_de = np.empty(
            max(blocks_per_pass(0), blocks_per_pass(b // 2)) + 8, np.float64
        )

    def _cost_map(self, out, delta):
        _kernels.data_cost_map(
            *self._vol_args, self.field.u, delta[0], delta[1], delta[2],
            *self._weights, out,
        )

    def _refresh(self, flips: np.ndarray):
        for d, delta in enumerate(self.deltas):
            _kernels.data_cost_at(
                flips, flips.size, *self._vol_args, self.field.u,
                delta[0], delta[1], delta[2], *self._weights,
                self.data_move[d],
            )

    def full_energy(self) -> float:
        cfg = self.cfg
        w = self._weights
        sums = _kernels.data_cost_sums(
            *self._vol_args, self.field.u, *w,
        )
        reg = cfg.regularization_weight * _kernels.reg_energy(
            self.field.u, self.rsp[0], self.rsp[1], self.rsp[2]
        )
        return float(sums.sum() + reg)

    def sweep(self) -> bool:
        """One full sweep over the six candidate steps and both block passes.

        Returns True when any block move was accepted.  ``self.energy``
        tracks the exact running total.
        """
        cfg = self.cfg
        lam = cfg.regularization_weight
        any_flip = False
        for d, delta in enumerate(self.deltas):
            for off in (0, cfg.block_size // 2):
                n_flips, n_blocks, de = _kernels.sweep_pass(
                    self.field.u, self.data_keep, self.data_move[d],
                    delta[0], delta[1], delta[2], lam,
                    self.rsp[0], self.rsp[1], self.rsp[2],
                    cfg.block_size, off,
                    *self._scratch,
                    self._flip_out, self._block_de,
                )
                self.energy += de
                if self.trace is not None:
                    self.trace.record_pass(self._block_de[:n_blocks].copy())
                if n_flips:
                    any_flip = True
                    self._refresh(np.sort(self._flip_out[:n_flips]))
        return any_flip


def graphcut_sweep(field: DisplacementField, ref_chans, flt_chans,
                   cfg: StageConfig,
                   trace: EnergyTrace | None = None):
    """Run one full binary move-making sweep at the field's grid.

    The field is updated in place; returns (field, energy_decreased).
    """
    opt = _LevelOptimizer(_as_channels(ref_chans), _as_channels(flt_chans),
                          cfg, field, trace)
    e0 = opt.energy
    decreased = opt.sweep()
    if trace is not None:
        trace.record_checkpoint("sweep", opt.energy, opt.full_energy())
    return field, decreased and opt.energy < e0


# ---------------------------------------------------------------------------
# Full registration
# ---------------------------------------------------------------------------

MIN_LEVEL_DIM = 3


def build_pyramid(sub, levels: int):
    """Per-channel Gaussian pyramids, index 0 = finest.

    Levels stop early when halving would drop an axis below
    MIN_LEVEL_DIM voxels: such grids carry no usable image structure and
    uniform whole-block moves there are unregularized, so optimizing them
    can teleport the field.
    """
    chans = list(_as_channels(sub))
    pyramid = [chans]
    for _ in range(1, levels):
        if any((d + 1) // 2 < MIN_LEVEL_DIM for d in chans[0].dims):
            break
        chans = [gaussian_downsample(c) for c in chans]
        pyramid.append(chans)
    return pyramid


def _optimize_level(ref_chans, flt_chans, cfg, field, max_iters, trace,
                    log=None):
    opt = _LevelOptimizer(ref_chans, flt_chans, cfg, field, trace)
    if trace is not None:
        trace.record_checkpoint("level-start", opt.energy, opt.full_energy())
    sweeps = 0
    for _ in range(max_iters):
        e_before = opt.energy
        moved = opt.sweep()
        sweeps += 1
        if not moved:
            break
        if e_before - opt.energy < CONVERGENCE_REL * abs(e_before):
            break
    if trace is not None:
        trace.record_checkpoint("level-end", opt.energy, opt.full_energy())
    if log is not None:
        log(f"    level {field.dims}: {sweeps} sweep(s), "
            f"energy {opt.energy:.6g}")
    return field


def register_deformable(ref_sub, flt_sub, init: AffineInit,
                        stages: list[StageConfig] | None = None,
                        trace: EnergyTrace | None = None,
                        log=None) -> DisplacementField:
    """Full two-stage registration of a floating subject onto a reference.

    Per stage, channel pyramids are built, the coarsest field comes from the
    affine initialization (stage 1) or the previous stage's output, each
    level runs sweeps until no candidate improves the energy, the relative
    decrease falls below 1e-5, or the level's iteration budget is exhausted
    (0 skips the level), and fields are trilinearly upsampled between
    levels.
    """
    if stages is None:
        stages = default_stage_configs()
    if len(stages) != 2:
        raise ValueError(f"expected 2 stage configs, got {len(stages)}")

    levels = max(s.levels for s in stages)
    ref_pyr = build_pyramid(ref_sub, levels)
    flt_pyr = build_pyramid(flt_sub, levels)

    field: DisplacementField | None = None
    for stage_idx, cfg in enumerate(stages):
        n_lvl = min(cfg.levels, len(ref_pyr))
        # when the pyramid stops early, keep the finest-end alignment of
        # the iteration list (the trailing 0 still skips the finest level)
        iter_list = cfg.max_iterations[-n_lvl:]
        coarse_geo = ref_pyr[n_lvl - 1][0].geometry
        if field is None:
            field = affine_to_field(init, coarse_geo)
        else:
            field = field.resample_to(coarse_geo)
        if log is not None:
            log(f"  stage {stage_idx + 1} "
                f"(block {cfg.block_size}, lambda "
                f"{cfg.regularization_weight})")
        for lvl in range(n_lvl - 1, -1, -1):
            iters = iter_list[n_lvl - 1 - lvl]
            if iters > 0:
                field = _optimize_level(
                    ref_pyr[lvl], flt_pyr[lvl], cfg, field, iters, trace, log
                )
            if lvl > 0:
                field = field.resample_to(ref_pyr[lvl - 1][0].geometry)
    return field


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def warp(flt: Volume, field: DisplacementField) -> Volume:
    """Resample a floating volume through the field onto the reference grid."""
    vals = _kernels.warp_volume(
        np.ascontiguousarray(flt.values, dtype=np.float32),
        flt.origin[0], flt.origin[1], flt.origin[2],
        flt.spacing[0], flt.spacing[1], flt.spacing[2],
        flt.fill(),
        field.u,
        field.origin[0], field.origin[1], field.origin[2],
        field.spacing[0], field.spacing[1], field.spacing[2],
    )
    return Volume(vals, field.spacing, field.origin, flt.fill_value)


def warp_labels(flt: LabelVolume, field: DisplacementField) -> LabelVolume:
    """Nearest-neighbor label warp onto the reference grid (outside -> 0)."""
    lab = _kernels.warp_labels_nearest(
        np.ascontiguousarray(flt.labels, dtype=np.int32),
        flt.origin[0], flt.origin[1], flt.origin[2],
        flt.spacing[0], flt.spacing[1], flt.spacing[2],
        field.u,
        field.origin[0], field.origin[1], field.origin[2],
        field.spacing[0], field.spacing[1], field.spacing[2],
    )
    return LabelVolume(lab, field.spacing, field.origin)
