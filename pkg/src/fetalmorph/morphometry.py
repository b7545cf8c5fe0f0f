"""Jacobian-based enlargement maps, volumetry, and overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ImageGrid, LabelMap, Volume
from .resample import sample_at_voxels
from .transforms import DeformationField

LOGDET_SENTINEL = -10.0


@dataclass
class OverlapMetrics:
    dice: float
    sensitivity: float
    specificity: float


def _displacement_jacobian(field: DeformationField) -> np.ndarray:
    """Per-voxel world-space Jacobian of x + u(x), shape (..., 3, 3)."""
    u = field.displacements
    grid = field.grid
    A_inv = np.linalg.inv(grid.direction @ np.diag(grid.spacing))
    J = np.empty((*grid.dims, 3, 3))
    for comp in range(3):
        g_idx = np.stack(np.gradient(u[..., comp]), axis=-1)  # d u_comp / d ijk
        J[..., comp, :] = g_idx @ A_inv
    J += np.eye(3)
    return J


def jacobian_det(field: DeformationField) -> np.ndarray:
    return np.linalg.det(_displacement_jacobian(field))


def jacobian_log_det(field: DeformationField) -> tuple[Volume, int]:
    """ln det(I + du/dx); non-positive determinants get a sentinel value.

    Returns the map and the count of non-positive-determinant voxels.
    """
    det = jacobian_det(field)
    bad = det <= 0
    out = np.full(det.shape, LOGDET_SENTINEL)
    out[~bad] = np.log(det[~bad])
    return Volume(field.grid, out), int(bad.sum())


def scale_daily(logjac: Volume, delta_days: float) -> Volume:
    if delta_days <= 0:
        raise ValueError("delta_days must be positive")
    return Volume(logjac.grid, logjac.data.astype(np.float64) / delta_days)


def transport_to_template(map_vol: Volume, chain, template_grid: ImageGrid) -> Volume:
    """Resample an enlargement map into template space through a transform chain.

    ``chain`` is a single transform/field or a sequence applied innermost-last:
    the sampled point is ``chain[0](chain[1](...(x)))``.
    """
    if not isinstance(chain, (list, tuple)):
        chain = [chain]
    pts = template_grid.world_mesh()
    for t in reversed(chain):
        pts = t.apply_points(pts)
    idx = map_vol.grid.world_to_voxel(pts)
    vals = sample_at_voxels(map_vol.data, idx, "linear")
    return Volume(template_grid, vals)


def stack_4d(maps: list[Volume]) -> tuple[np.ndarray, ImageGrid]:
    """Stack template-space maps into a (nx, ny, nz, n) array, input order kept."""
    if not maps:
        raise ValueError("nothing to stack")
    grid = maps[0].grid
    for m in maps[1:]:
        if not grid.same_geometry(m.grid):
            raise ValueError("all maps must share the template grid")
    return np.stack([m.data for m in maps], axis=-1).astype(np.float32), grid


def label_volume(labels: LabelMap, label: int) -> float:
    """Volume of one label in mm^3 (voxel count times voxel volume)."""
    return float((labels.data == label).sum()) * labels.grid.voxel_volume


def growth_rate(v_pre: float, v_post: float, ga_pre: float, ga_post: float) -> float:
    """Daily growth in mm^3/day over the scan interval given in GA weeks."""
    if ga_post <= ga_pre:
        raise ValueError("ga_post must exceed ga_pre")
    return (v_post - v_pre) / (7.0 * (ga_post - ga_pre))


def overlap_metrics(pred: LabelMap, truth: LabelMap, label: int = 1) -> OverlapMetrics:
    if not pred.grid.same_geometry(truth.grid):
        raise ValueError("overlap metrics need a common grid")
    p = pred.data == label
    t = truth.data == label
    if not t.any():
        raise ValueError("empty truth mask: dice/sensitivity undefined")
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    tn = float(np.logical_and(~p, ~t).sum())
    dice = 2.0 * tp / (p.sum() + t.sum())
    sensitivity = tp / t.sum()
    specificity = tn / (tn + fp) if (tn + fp) > 0 else 1.0
    return OverlapMetrics(float(dice), float(sensitivity), float(specificity))


def mass_conserved_volume(logjac: Volume, mask: LabelMap, label: int = 1) -> float:
    """Integral of det J over the mask — the volume of the warped mask region."""
    sel = mask.data == label
    return float(np.exp(logjac.data[sel].astype(np.float64)).sum() * logjac.grid.voxel_volume)
