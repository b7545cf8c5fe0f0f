"""Classic (threshold + morphology) ventricle segmentation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import LABEL_NAMES, VENTRICLE_LABEL, LabelMap, Volume


class SegmentationError(RuntimeError):
    pass


@dataclass
class SegParams:
    intensity_quantile: float = 0.85
    morph_radius_voxels: int = 1
    min_component_mm3: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.intensity_quantile < 1.0:
            raise ValueError("intensity_quantile must lie in (0, 1)")
        if self.morph_radius_voxels < 0:
            raise ValueError("morph_radius_voxels must be >= 0")


def _ball(radius: int) -> np.ndarray:
    if radius == 0:
        return np.ones((1, 1, 1), dtype=bool)
    r = radius
    zz, yy, xx = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return xx**2 + yy**2 + zz**2 <= r**2


def segment_ventricles(vol: Volume, brain_mask: LabelMap, params: SegParams | None = None) -> LabelMap:
    """Bright-CSF threshold segmentation restricted to the brain mask.

    Components touching the brain-mask boundary are discarded (external CSF);
    the quantile threshold makes the result invariant to affine intensity
    rescaling.
    """
    params = params or SegParams()
    mask = brain_mask.data > 0
    if not mask.any():
        raise SegmentationError("brain mask is empty")

    inside = vol.data[mask].astype(np.float64)
    if np.ptp(inside) == 0:
        raise SegmentationError("no ventricle found (constant intensity)")
    thr = np.quantile(inside, params.intensity_quantile)
    seg = (vol.data >= thr) & mask

    ball = _ball(params.morph_radius_voxels)
    if params.morph_radius_voxels > 0:
        seg = ndimage.binary_opening(seg, structure=ball)
        seg = ndimage.binary_closing(seg, structure=ball)

    # boundary shell of the brain mask: anything connected to it is external CSF
    interior = ndimage.binary_erosion(mask, structure=_ball(1), iterations=2)
    boundary_shell = mask & ~interior

    labels, n = ndimage.label(seg)
    keep = np.zeros_like(seg)
    min_vox = params.min_component_mm3 / vol.grid.voxel_volume
    for i in range(1, n + 1):
        comp = labels == i
        if comp.sum() < min_vox:
            continue
        if np.any(comp & boundary_shell):
            continue
        keep |= comp
    if not keep.any():
        raise SegmentationError("no ventricle found")
    return LabelMap(vol.grid, keep.astype(np.int16) * VENTRICLE_LABEL, dict(LABEL_NAMES))
