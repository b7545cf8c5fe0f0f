"""Geometric 3D image model: grids, volumes, label maps, coordinate transforms.

World coordinates are in millimetres. A grid maps integer voxel indices
(i, j, k) to world points through ``origin + direction @ (spacing * ijk)``,
with the origin at the *center* of voxel (0, 0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class ImageGrid:
    """Voxel lattice with world-space geometry."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        if any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"grid spacing must be > 0, got {spacing}")
        err = np.abs(direction.T @ direction - np.eye(3)).max()
        if err >= _ORTHO_TOL:
            raise ValueError(f"direction matrix not orthonormal (max dev {err:g})")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        direction.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index -> world-mm homogeneous matrix."""
        A = np.eye(4)
        A[:3, :3] = self.direction @ np.diag(self.spacing)
        A[:3, 3] = self.origin
        return A

    def voxel_to_world(self, ijk) -> np.ndarray:
        """Map (continuous) voxel indices to world mm. Accepts (..., 3) arrays."""
        ijk = np.asarray(ijk, dtype=np.float64)
        A = self.direction @ np.diag(self.spacing)
        return ijk @ A.T + np.asarray(self.origin)

    def world_to_voxel(self, xyz) -> np.ndarray:
        """Inverse of :meth:`voxel_to_world`; returns continuous indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        A = self.direction @ np.diag(self.spacing)
        return (xyz - np.asarray(self.origin)) @ np.linalg.inv(A).T

    def index_mesh(self) -> np.ndarray:
        """Dense (nx, ny, nz, 3) array of integer voxel indices."""
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]),
            np.arange(self.dims[1]),
            np.arange(self.dims[2]),
            indexing="ij",
        )
        return np.stack([ii, jj, kk], axis=-1).astype(np.float64)

    def world_mesh(self) -> np.ndarray:
        """Dense (nx, ny, nz, 3) array of world coordinates of voxel centers."""
        return self.voxel_to_world(self.index_mesh())

    def same_geometry(self, other: "ImageGrid", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )


def centered_grid(dims, spacing, direction=None) -> ImageGrid:
    """Grid whose world-space center sits at the origin."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    direction = np.eye(3) if direction is None else np.asarray(direction)
    half = np.array([(d - 1) / 2.0 * s for d, s in zip(dims, spacing)])
    origin = tuple(-(direction @ half))
    return ImageGrid(dims, spacing, origin, direction)


@dataclass
class Volume:
    """Scalar 3D image: geometry plus a float32 intensity array."""

    grid: ImageGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32).reshape(self.grid.dims)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")

    def copy(self) -> "Volume":
        return Volume(self.grid, self.data.copy())


@dataclass
class LabelMap:
    """Integer 3D image sharing Volume geometry."""

    grid: ImageGrid
    data: np.ndarray
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.int16).reshape(self.grid.dims)
        present = set(np.unique(self.data).tolist()) - {0}
        if self.label_names:
            unknown = present - set(self.label_names)
            if unknown:
                raise ValueError(f"labels {sorted(unknown)} missing from label_names")
        else:
            self.label_names = {int(v): f"label{int(v)}" for v in sorted(present)}

    def copy(self) -> "LabelMap":
        return LabelMap(self.grid, self.data.copy(), dict(self.label_names))


VENTRICLE_LABEL = 1
LABEL_NAMES = {VENTRICLE_LABEL: "ventricles"}
