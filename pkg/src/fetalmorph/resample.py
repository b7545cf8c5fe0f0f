"""World-space resampling of volumes and label maps."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .grid import ImageGrid, LabelMap, Volume


def sample_at_voxels(data: np.ndarray, idx: np.ndarray, interp: str = "linear") -> np.ndarray:
    """Sample ``data`` at continuous voxel indices ``idx`` of shape (..., 3).

    Inside the domain interpolation clamps to the edge; beyond the half-voxel
    border the result is background 0.
    """
    coords = np.moveaxis(idx, -1, 0)
    order = 1 if interp == "linear" else 0
    out = ndimage.map_coordinates(
        np.asarray(data, dtype=np.float64), coords, order=order, mode="nearest"
    )
    dims = np.array(data.shape)
    outside = np.any((idx < -0.5) | (idx > dims - 0.5), axis=-1)
    out[outside] = 0.0
    return out


def resample(img: Volume | LabelMap, target: ImageGrid, interp: str = "linear"):
    """Pull-back resampling of a Volume or LabelMap onto ``target``.

    Label maps require nearest-neighbour interpolation.
    """
    is_label = isinstance(img, LabelMap)
    if is_label and interp != "nearest":
        raise ValueError("label maps must be resampled with nearest interpolation")
    if interp not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")

    src_idx = img.grid.world_to_voxel(target.world_mesh())
    vals = sample_at_voxels(img.data, src_idx, interp)
    if is_label:
        return LabelMap(target, np.rint(vals).astype(np.int16), dict(img.label_names))
    return Volume(target, vals.astype(np.float32))


def gaussian_smooth(vol: Volume, sigma_mm: float) -> Volume:
    """Isotropic Gaussian smoothing with sigma given in millimetres."""
    if sigma_mm <= 0:
        return vol.copy()
    sig_vox = [sigma_mm / s for s in vol.grid.spacing]
    return Volume(vol.grid, ndimage.gaussian_filter(vol.data.astype(np.float64), sig_vox))


def downsample_grid(grid: ImageGrid, factor: int) -> ImageGrid:
    """Coarsen a grid by an integer factor, preserving world placement."""
    dims = tuple(max(1, int(np.ceil(d / factor))) for d in grid.dims)
    spacing = tuple(s * factor for s in grid.spacing)
    # new voxel (0,0,0) center sits where old voxel centers average to
    shift = (factor - 1) / 2.0
    origin = grid.voxel_to_world([shift, shift, shift])
    return ImageGrid(dims, spacing, tuple(origin), grid.direction)
