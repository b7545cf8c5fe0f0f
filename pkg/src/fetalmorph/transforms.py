"""Rigid/affine transforms, dense deformation fields, and their algebra.

Transforms map *fixed-space* world points to *moving-space* world points
(pull-back convention): warping an image evaluates ``moving(T(x))`` at each
fixed-space voxel center x.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import ImageGrid, LabelMap, Volume
from .resample import sample_at_voxels


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray
    translation: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(M)) <= 1e-9:
            raise ValueError("affine matrix is singular")
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    def apply_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.center) @ self.matrix.T + self.center + self.translation

    def invert(self) -> "AffineTransform":
        Minv = np.linalg.inv(self.matrix)
        return type(self)(Minv, -Minv @ self.translation, self.center)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": type(self).__name__,
                "convention": "fixed-world -> moving-world, y = M (x - c) + c + t",
                "matrix": self.matrix.tolist(),
                "translation": self.translation.tolist(),
                "center": self.center.tolist(),
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "AffineTransform":
        d = json.loads(text)
        cls = RigidTransform if d.get("kind") == "RigidTransform" else AffineTransform
        return cls(np.array(d["matrix"]), np.array(d["translation"]), np.array(d["center"]))


class RigidTransform(AffineTransform):
    """Affine restricted to a proper rotation."""

    def __post_init__(self):
        super().__post_init__()
        R = self.matrix
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6 or np.linalg.det(R) <= 0:
            raise ValueError("rigid rotation must be orthonormal with det +1")


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Z·Y·X Euler rotation (angles in radians)."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def euler_from_rotation(R: np.ndarray) -> tuple[float, float, float]:
    ry = -np.arcsin(np.clip(R[2, 0], -1, 1))
    rx = np.arctan2(R[2, 1], R[2, 2])
    rz = np.arctan2(R[1, 0], R[0, 0])
    return float(rx), float(ry), float(rz)


def identity_rigid(center=(0.0, 0.0, 0.0)) -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3), np.asarray(center))


@dataclass
class DeformationField:
    """Dense displacement field: x -> x + u(x), u in world mm."""

    grid: ImageGrid
    displacements: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        u = np.asarray(self.displacements, dtype=np.float64)
        if u.shape != (*self.grid.dims, 3):
            raise ValueError(f"displacement shape {u.shape} incompatible with grid {self.grid.dims}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacements must be finite")
        self.displacements = u

    def apply_points(self, pts) -> np.ndarray:
        """Map fixed-space points through interpolation of the field."""
        pts = np.asarray(pts, dtype=np.float64)
        idx = self.grid.world_to_voxel(pts)
        u = np.stack(
            [sample_at_voxels(self.displacements[..., a], idx, "linear") for a in range(3)],
            axis=-1,
        )
        return pts + u

    @staticmethod
    def identity(grid: ImageGrid) -> "DeformationField":
        return DeformationField(grid, np.zeros((*grid.dims, 3)))

    @staticmethod
    def from_affine(t: AffineTransform, grid: ImageGrid) -> "DeformationField":
        xyz = grid.world_mesh()
        return DeformationField(grid, t.apply_points(xyz) - xyz)


@dataclass
class VelocityField:
    """Stationary velocity field, exp-mapped by scaling and squaring."""

    grid: ImageGrid
    velocities: np.ndarray

    def exp(self, n_squarings: int = 6) -> DeformationField:
        return _exp_svf(self.grid, self.velocities, n_squarings)

    def exp_inverse(self, n_squarings: int = 6) -> DeformationField:
        return _exp_svf(self.grid, -self.velocities, n_squarings)


def _compose_displacements(grid: ImageGrid, u_outer: np.ndarray, u_inner: np.ndarray) -> np.ndarray:
    """Displacement of x -> (id+u_outer) o (id+u_inner): u_in(x) + u_out(x + u_in(x))."""
    xyz = grid.world_mesh()
    warped = xyz + u_inner
    idx = grid.world_to_voxel(warped)
    sampled = np.stack(
        [sample_at_voxels(u_outer[..., a], idx, "linear") for a in range(3)], axis=-1
    )
    return u_inner + sampled


def _exp_svf(grid: ImageGrid, v: np.ndarray, n_squarings: int) -> DeformationField:
    u = np.asarray(v, dtype=np.float64) / (2.0**n_squarings)
    for _ in range(n_squarings):
        u = _compose_displacements(grid, u, u)
    return DeformationField(grid, u)


def compose(outer, inner, grid: ImageGrid | None = None) -> DeformationField:
    """Field for ``x -> outer(inner(x))``; accepts transforms or fields."""
    if grid is None:
        for t in (inner, outer):
            if isinstance(t, DeformationField):
                grid = t.grid
                break
    if grid is None:
        raise ValueError("composing two analytic transforms needs an explicit grid")
    xyz = grid.world_mesh()
    inner_pts = inner.apply_points(xyz)
    outer_pts = outer.apply_points(inner_pts)
    return DeformationField(grid, outer_pts - xyz)


def compose_affine(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Analytic composition x -> outer(inner(x)), re-centered at the origin."""
    M = outer.matrix @ inner.matrix
    # expand both around center 0: y = M x + t
    t_inner = -inner.matrix @ inner.center + inner.center + inner.translation
    t_outer = -outer.matrix @ outer.center + outer.center + outer.translation
    t = outer.matrix @ t_inner + t_outer
    cls = RigidTransform if isinstance(outer, RigidTransform) and isinstance(inner, RigidTransform) else AffineTransform
    return cls(M, t, np.zeros(3))


def apply_transform(
    img: Volume | LabelMap,
    transform,
    target_grid: ImageGrid | None = None,
    interp: str = "linear",
):
    """Resample ``img`` through a transform or deformation field."""
    is_label = isinstance(img, LabelMap)
    if is_label and interp != "nearest":
        raise ValueError("label maps must be warped with nearest interpolation")
    grid = target_grid or (transform.grid if isinstance(transform, DeformationField) else img.grid)
    pts = transform.apply_points(grid.world_mesh())
    idx = img.grid.world_to_voxel(pts)
    vals = sample_at_voxels(img.data, idx, interp)
    if is_label:
        return LabelMap(grid, np.rint(vals).astype(np.int16), dict(img.label_names))
    return Volume(grid, vals.astype(np.float32))


def field_to_arrays(f: DeformationField) -> np.ndarray:
    return np.ascontiguousarray(f.displacements)


def write_field(f: DeformationField, path) -> None:
    from . import nifti

    nifti.write_array(f.displacements.astype(np.float32), f.grid, path, dtype=np.float32)


def read_field(path) -> DeformationField:
    from . import nifti

    data, grid, _ = nifti.read_array(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ValueError("deformation field file must be 4D with 3 components")
    return DeformationField(grid, np.asarray(data, dtype=np.float64))
