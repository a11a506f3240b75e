"""Render correlation maps as PNG slices over the template image.

Significant voxels are painted with a symmetric diverging colormap
(blue = -1, red = +1); insignificant voxels show the grayscale base image
in overlay mode and black in map-only mode.  One colorbar image is emitted
per run.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .volume import Volume  # noqa: E402

_CMAP = matplotlib.colormaps["bwr"]


def correlation_color(r: float) -> tuple[float, float, float]:
    """RGB for a correlation value in [-1, 1] (blue negative, red positive)."""
    t = (float(np.clip(r, -1.0, 1.0)) + 1.0) / 2.0
    rgba = _CMAP(t)
    return (rgba[0], rgba[1], rgba[2])


def _gray_window(template: Volume) -> tuple[float, float]:
    lo, hi = np.percentile(template.values, [1.0, 99.0])
    if hi <= lo:
        hi = lo + 1.0
    return float(lo), float(hi)


def render_slices(painted: Volume, template: Volume, slices, axis: str = "z",
                  out_dir=".", prefix: str = "slice",
                  map_only: bool = False) -> list[Path]:
    """Write one PNG per slice index plus a single colorbar PNG.

    Slice indices address the chosen axis (x, y or z); out-of-range indices
    raise IndexError.  Returns the written paths.
    """
    if painted.values.shape != template.values.shape:
        raise ValueError("correlation map and template must share geometry")
    axis = axis.lower()
    if axis not in ("x", "y", "z"):
        raise ValueError(f"axis must be x, y or z, got '{axis}'")
    arr_axis = {"z": 0, "y": 1, "x": 2}[axis]
    n = template.values.shape[arr_axis]
    lo, hi = _gray_window(template)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for idx in slices:
        idx = int(idx)
        if not 0 <= idx < n:
            raise IndexError(
                f"slice {idx} out of range for axis {axis} (size {n})"
            )
        base = np.take(template.values, idx, axis=arr_axis).astype(np.float64)
        rmap = np.take(painted.values, idx, axis=arr_axis).astype(np.float64)
        gray = np.clip((base - lo) / (hi - lo), 0.0, 1.0)
        if map_only:
            rgb = np.zeros(gray.shape + (3,))
        else:
            rgb = np.repeat(gray[:, :, None], 3, axis=2)
        sig = rmap != 0.0
        if sig.any():
            colored = _CMAP((np.clip(rmap[sig], -1, 1) + 1.0) / 2.0)[:, :3]
            rgb[sig] = colored
        path = out_dir / f"{prefix}_{axis}{idx:04d}.png"
        # flip vertically so +y points up in the image
        plt.imsave(path, rgb[::-1], vmin=0, vmax=1)
        written.append(path)

    cbar_path = out_dir / "colorbar.png"
    ramp = np.linspace(-1, 1, 256)
    strip = _CMAP((ramp + 1.0) / 2.0)[:, :3][None, :, :]
    plt.imsave(cbar_path, np.repeat(strip, 24, axis=0))
    written.append(cbar_path)
    return written
