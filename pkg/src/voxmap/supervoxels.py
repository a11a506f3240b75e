"""SLIC supervoxel clustering of the template volume.

Seeds sit on a regular lattice every ``seed_spacing`` voxels (perturbed to
the lowest-gradient voxel in a 3x3x3 neighborhood); assignment minimizes
D^2 = d_intensity^2 + (compactness * d_spatial / seed_spacing)^2 within a
2S window per cluster; after the iterations, 6-connectivity is enforced by
relabeling disconnected fragments into their largest adjacent cluster.
Labels are compacted to 1..K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .volume import LabelVolume, Volume

_CONN6 = ndimage.generate_binary_structure(3, 1)


@dataclass
class SupervoxelDecomposition:
    labels: LabelVolume       # labels 1..count on every voxel
    count: int
    seed_spacing: int
    compactness: float

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.labels.ravel(),
                           minlength=self.count + 1)[1:]


def _seed_positions(dim: int, spacing: int) -> np.ndarray:
    """Lattice coordinates along one axis; single centered seed if short."""
    if dim < spacing:
        return np.array([dim // 2], dtype=np.int64)
    n = dim // spacing
    offset = (dim - (n - 1) * spacing) // 2
    return offset + spacing * np.arange(n, dtype=np.int64)


def _gradient_sq(vals: np.ndarray) -> np.ndarray:
    g2 = np.zeros(vals.shape, dtype=np.float32)
    for axis in range(3):
        if vals.shape[axis] < 2:
            continue
        g = np.gradient(vals.astype(np.float32), axis=axis)
        g2 += g * g
    return g2


def slic_cluster(intensity: Volume, seed_spacing: int = 25,
                 compactness: float = 0.2,
                 max_iters: int = 10) -> SupervoxelDecomposition:
    """Partition a volume into connected supervoxels."""
    if seed_spacing < 2:
        raise ValueError(f"seed_spacing must be >= 2, got {seed_spacing}")
    vals = np.ascontiguousarray(intensity.values, dtype=np.float32)
    if vals.size == 0:
        raise ValueError("cannot cluster an empty volume")
    nz, ny, nx = vals.shape

    # seeds, perturbed to the lowest-gradient voxel nearby
    g2 = _gradient_sq(vals)
    seeds = []
    for sz in _seed_positions(nz, seed_spacing):
        for sy in _seed_positions(ny, seed_spacing):
            for sx in _seed_positions(nx, seed_spacing):
                best = (np.inf, sx, sy, sz)
                for dz in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            x, y, z = sx + dx, sy + dy, sz + dz
                            if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz:
                                gv = g2[z, y, x]
                                if gv < best[0]:
                                    best = (gv, x, y, z)
                seeds.append(best[1:])
    seeds = np.asarray(seeds, dtype=np.float64)
    cx = np.ascontiguousarray(seeds[:, 0])
    cy = np.ascontiguousarray(seeds[:, 1])
    cz = np.ascontiguousarray(seeds[:, 2])
    ci = np.array([vals[int(z), int(y), int(x)]
                   for x, y, z in seeds], dtype=np.float64)
    K = cx.size

    labels = np.zeros(vals.shape, dtype=np.int32)
    dist = np.empty(vals.shape, dtype=np.float64)
    for _ in range(max_iters):
        labels.fill(0)
        dist.fill(np.inf)
        _kernels.slic_assign(vals, cx, cy, cz, ci, seed_spacing, compactness,
                             labels, dist)
        _kernels.slic_assign_orphans(vals, cx, cy, cz, ci, seed_spacing,
                                     compactness, labels, dist)
        cnt, sx_, sy_, sz_, si_ = _kernels.slic_update(vals, labels, K)
        nz_mask = cnt > 0
        cx[nz_mask] = sx_[nz_mask] / cnt[nz_mask]
        cy[nz_mask] = sy_[nz_mask] / cnt[nz_mask]
        cz[nz_mask] = sz_[nz_mask] / cnt[nz_mask]
        ci[nz_mask] = si_[nz_mask] / cnt[nz_mask]

    labels = _enforce_connectivity(labels)
    labels, count = _compact_labels(labels)
    return SupervoxelDecomposition(
        labels=LabelVolume(labels, intensity.spacing, intensity.origin),
        count=count,
        seed_spacing=seed_spacing,
        compactness=compactness,
    )


def _enforce_connectivity(labels: np.ndarray, max_passes: int = 12,
                          ) -> np.ndarray:
    """Merge disconnected fragments into their largest adjacent cluster."""
    labels = labels.copy()
    for _ in range(max_passes):
        counts = np.bincount(labels.ravel())
        fragments = []
        for lab in np.unique(labels):
            if lab == 0:
                continue
            cc, n_cc = ndimage.label(labels == lab, structure=_CONN6)
            if n_cc <= 1:
                continue
            sizes = np.bincount(cc.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            for frag_id in range(1, n_cc + 1):
                if frag_id != keep:
                    fragments.append((int(lab), cc == frag_id))
        if not fragments:
            return labels
        for lab, frag in fragments:
            dil = ndimage.binary_dilation(frag, structure=_CONN6) & ~frag
            neigh = np.unique(labels[dil])
            neigh = neigh[(neigh != lab) & (neigh != 0)]
            if neigh.size == 0:
                continue  # only touches its own label; resolved next pass
            best = neigh[np.argmax(counts[neigh])]
            labels[frag] = best
    return labels


def _compact_labels(labels: np.ndarray) -> tuple[np.ndarray, int]:
    present = np.unique(labels)
    present = present[present != 0]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int32)
    lut[present] = np.arange(1, present.size + 1, dtype=np.int32)
    return lut[labels], int(present.size)


def supervoxel_means(decomp: SupervoxelDecomposition, v: Volume,
                     exclusion: np.ndarray | None = None,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean of ``v`` per supervoxel over non-excluded voxels.

    Returns (means, counts), indexed by label-1; labels with no eligible
    voxels get count 0 and mean NaN.
    """
    lab = decomp.labels.labels
    if lab.shape != v.values.shape:
        raise ValueError("volume does not match decomposition geometry")
    vals = v.values.astype(np.float64).ravel()
    flat = lab.ravel()
    if exclusion is not None:
        keep = ~np.asarray(exclusion, dtype=bool).ravel()
        flat = flat[keep]
        vals = vals[keep]
    counts = np.bincount(flat, minlength=decomp.count + 1)[1:]
    sums = np.bincount(flat, weights=vals, minlength=decomp.count + 1)[1:]
    means = np.full(decomp.count, np.nan)
    nz_sel = counts > 0
    means[nz_sel] = sums[nz_sel] / counts[nz_sel]
    return means, counts
