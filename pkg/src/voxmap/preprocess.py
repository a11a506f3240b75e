"""Registration preprocessing: organ removal, density channels, rescaling.

The registration consumes five channels per subject: the clipped and
rescaled intensity image plus four fuzzy masks (cardiac cavities,
myocardium+aorta, high-density tissue, low-density tissue).  Density
channels are thresholded on the median-filtered image *before* the clip so
the [-400, 0) low-density interval is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .volume import LabelVolume, Volume, check_same_geometry, median_filter

HU_REMOVED = -1000.0
HU_CLIP_LO = -300.0
HU_CLIP_HI = 200.0
HU_RESCALE = 1.0 / 300.0
MEDIAN_RADIUS = 4
LOW_DENSITY_LO = -400.0

CAVITY_REGIONS = ("lv", "rv", "la", "ra")
MYO_AORTA_REGIONS = ("myo", "aorta")
REQUIRED_REGIONS = CAVITY_REGIONS + MYO_AORTA_REGIONS
EXCLUSION_REGIONS = ("lungs", "liver", "stomach", "esophagus")


class PreprocessError(ValueError):
    """Raised for missing or inconsistent preprocessing inputs."""


@dataclass
class PreprocessedSubject:
    """The five registration channels plus the organ-exclusion label map.

    All channels share the source image geometry.  ``intensity`` values lie
    in [-1, 2/3]; the four mask channels are binary floats.
    """

    intensity: Volume
    cavity_mask: Volume
    myo_aorta_mask: Volume
    high_density_mask: Volume
    low_density_mask: Volume
    exclusion_mask: LabelVolume

    @property
    def channels(self) -> tuple[Volume, Volume, Volume, Volume, Volume]:
        return (self.intensity, self.cavity_mask, self.myo_aorta_mask,
                self.high_density_mask, self.low_density_mask)

    @property
    def geometry(self):
        return self.intensity.geometry


def _union(masks: Mapping[str, LabelVolume], regions) -> np.ndarray:
    out = None
    for r in regions:
        if r not in masks:
            continue
        m = masks[r].mask()
        out = m if out is None else (out | m)
    return out


def preprocess_subject(image: Volume,
                       masks: Mapping[str, LabelVolume]) -> PreprocessedSubject:
    """Build the registration channels from an HU image and anatomical masks.

    Requires masks for lv, rv, la, ra, myo and aorta; exclusion organs
    (lungs, liver, stomach, esophagus) are used when present.
    """
    for r in REQUIRED_REGIONS:
        if r not in masks:
            raise PreprocessError(f"missing required mask: '{r}'")
    for r, m in masks.items():
        check_same_geometry(image, m, f"image and mask '{r}'")

    work = image.values.astype(np.float32).copy()
    excl = _union(masks, EXCLUSION_REGIONS)
    excl_labels = np.zeros(work.shape, dtype=np.int32)
    if excl is not None:
        work[excl] = HU_REMOVED
        excl_labels[excl] = 1

    med = median_filter(Volume(work, image.spacing, image.origin),
                        MEDIAN_RADIUS).values
    high = (med >= 0.0).astype(np.float32)
    low = ((med >= LOW_DENSITY_LO) & (med < 0.0)).astype(np.float32)

    intensity = np.clip(work, HU_CLIP_LO, HU_CLIP_HI) * np.float32(HU_RESCALE)

    cavity = _union(masks, CAVITY_REGIONS).astype(np.float32)
    myo_aorta = _union(masks, MYO_AORTA_REGIONS).astype(np.float32)

    def vol(arr, fill=None):
        return Volume(np.ascontiguousarray(arr), image.spacing, image.origin,
                      fill_value=fill)

    return PreprocessedSubject(
        intensity=vol(intensity),
        cavity_mask=vol(cavity, 0.0),
        myo_aorta_mask=vol(myo_aorta, 0.0),
        high_density_mask=vol(high, 0.0),
        low_density_mask=vol(low, 0.0),
        exclusion_mask=LabelVolume(excl_labels, image.spacing, image.origin),
    )
