"""Rigid, affine, and diffeomorphic registration.

The diffeomorphic stage is a symmetric stationary-velocity-field method:
demons-style forces toward both images, Gaussian fluid/elastic smoothing,
and scaling-and-squaring exponentiation — yielding fold-free forward and
inverse fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage, optimize

from .grid import ImageGrid, Volume
from .resample import downsample_grid, gaussian_smooth, resample, sample_at_voxels
from .transforms import (
    AffineTransform,
    DeformationField,
    RigidTransform,
    VelocityField,
    compose_affine,
    rotation_from_euler,
)


class RegistrationError(RuntimeError):
    pass


@dataclass
class LinearParams:
    metric: str = "mse"  # mse | ncc
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    smooth_sigma_vox: float = 1.0
    fine_smooth_sigma_vox: float = 0.75  # damps interpolation kinks at full res
    max_iter: int = 100
    xtol: float = 1e-6
    rot_scale: float = 0.05  # radians per unit of the scaled variable
    trans_scale: float = 2.0  # mm per unit
    matrix_scale: float = 0.05


@dataclass
class DiffeoParams:
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    iterations: tuple[int, ...] = (100, 80, 30)
    sigma_update_vox: float = 2.0
    sigma_total_vox: float = 1.0
    n_squarings: int = 6
    step: float = 2.0
    intensity_sigma: float = 0.5  # demons normalization in units of mean spacing
    max_fold_retries: int = 3


def _check_overlap(fixed: Volume, moving: Volume):
    for name, v in (("fixed", fixed), ("moving", moving)):
        if not np.any(v.data > 0):
            raise RegistrationError(f"{name} volume is all background")


def _pyramid(vol: Volume, factors, sigma_vox: float, fine_sigma_vox: float = 0.0):
    levels = []
    for f in factors:
        if f == 1:
            sm = gaussian_smooth(vol, fine_sigma_vox * float(np.mean(vol.grid.spacing)))
            levels.append(sm)
            continue
        sm = gaussian_smooth(vol, sigma_vox * f / 2.0 * float(np.mean(vol.grid.spacing)))
        levels.append(resample(sm, downsample_grid(vol.grid, f), "linear"))
    return levels


def _affine_warp(fixed: Volume, moving: Volume, transform: AffineTransform) -> np.ndarray:
    """Warp ``moving`` onto the fixed grid through an analytic transform.

    The fixed-index -> moving-index map is affine, so the interpolation runs
    entirely in scipy's C path.
    """
    Af = fixed.grid.direction @ np.diag(fixed.grid.spacing)
    Am_inv = np.linalg.inv(moving.grid.direction @ np.diag(moving.grid.spacing))
    # world map: y = M (x - c) + c + t
    M, c, t = transform.matrix, transform.center, transform.translation
    B = Am_inv @ M @ Af
    b = Am_inv @ (M @ (np.asarray(fixed.grid.origin) - c) + c + t - np.asarray(moving.grid.origin))
    return ndimage.affine_transform(
        moving.data.astype(np.float64), B, offset=b, output_shape=fixed.grid.dims,
        order=1, mode="constant", cval=0.0,
    )


def _warp_mse(fixed: Volume, moving: Volume, transform) -> float:
    warped = _affine_warp(fixed, moving, transform)
    return float(np.mean((fixed.data.astype(np.float64) - warped) ** 2))


def _warp_neg_ncc(fixed: Volume, moving: Volume, transform) -> float:
    warped = _affine_warp(fixed, moving, transform)
    f = fixed.data.astype(np.float64).ravel() - fixed.data.mean()
    m = warped.ravel() - warped.mean()
    denom = np.linalg.norm(f) * np.linalg.norm(m)
    if denom == 0:
        return 0.0
    return -float(np.dot(f, m) / denom)


def _metric_fn(name: str):
    if name == "mse":
        return _warp_mse
    if name == "ncc":
        return _warp_neg_ncc
    raise ValueError(f"unknown metric {name!r}")


def _volume_center(grid: ImageGrid) -> np.ndarray:
    return grid.voxel_to_world([(d - 1) / 2.0 for d in grid.dims])


def _euler_derivatives(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]


def _mse_and_grad_linear(f_lvl: Volume, m_lvl: Volume, transform: AffineTransform,
                         rel_pts: np.ndarray, param_mode: str,
                         moving_grad: np.ndarray):
    """MSE and its gradient w.r.t. the transform parameters.

    ``rel_pts`` are fixed-level voxel centers minus the rotation center,
    flattened to (N, 3); ``moving_grad`` is the precomputed world-space
    gradient of the moving image on its own lattice, warped here alongside
    the intensities so that boundary truncation cannot corrupt the gradient.
    ``param_mode``: 'rigid' (3 angles + 3 trans) or 'affine' (9 matrix + 3 trans).
    """
    warped = _affine_warp(f_lvl, m_lvl, transform)
    r = warped - f_lvl.data.astype(np.float64)
    n = r.size
    mse = float(np.mean(r * r))

    gm = np.stack(
        [
            _affine_warp(f_lvl, Volume(m_lvl.grid, moving_grad[..., a]), transform).ravel()
            for a in range(3)
        ],
        axis=-1,
    )
    rf = r.reshape(-1)
    common = gm * rf[:, None] * (2.0 / n)  # (N, 3)

    if param_mode == "rigid":
        from .transforms import euler_from_rotation

        angles = euler_from_rotation(transform.matrix)
        dRs = _euler_derivatives(*angles)
        g_rot = [float(np.sum(common * (rel_pts @ dR.T))) for dR in dRs]
        g_trans = common.sum(axis=0)
        return mse, np.array(g_rot + list(g_trans))
    # affine: dW/dM_ij = e_i (x - c)_j
    g_mat = common.T @ rel_pts  # (3, 3): rows i, cols j
    g_trans = common.sum(axis=0)
    return mse, np.concatenate([g_mat.ravel(), g_trans])


def _optimize_linear(fixed, moving, params, make_transform, z0, n_params, param_mode):
    metric_name = params.metric
    scales = (
        np.array([params.rot_scale] * 3 + [params.trans_scale] * 3)
        if param_mode == "rigid"
        else np.array([params.matrix_scale] * 9 + [params.trans_scale] * 3)
    )
    z = np.asarray(z0, dtype=np.float64)
    for f_lvl, m_lvl in zip(
        _pyramid(fixed, params.pyramid_factors, params.smooth_sigma_vox, params.fine_smooth_sigma_vox),
        _pyramid(moving, params.pyramid_factors, params.smooth_sigma_vox, params.fine_smooth_sigma_vox),
    ):
        center = make_transform(z, scales).center
        rel_pts = (f_lvl.grid.world_mesh().reshape(-1, 3) - center)
        moving_grad = world_gradient(m_lvl.data, m_lvl.grid)

        if metric_name == "mse":

            def fun(zz):
                t = make_transform(zz, scales)
                mse, g = _mse_and_grad_linear(f_lvl, m_lvl, t, rel_pts, param_mode, moving_grad)
                return mse, g * scales

            res = optimize.minimize(
                fun, z, jac=True, method="L-BFGS-B",
                options={"maxiter": params.max_iter, "ftol": 1e-14, "gtol": 1e-12},
            )
        else:
            metric = _metric_fn(metric_name)
            res = optimize.minimize(
                lambda zz: metric(f_lvl, m_lvl, make_transform(zz, scales)),
                z, method="Powell",
                options={"xtol": params.xtol, "ftol": 1e-10, "maxiter": params.max_iter},
            )
        z = res.x
    return make_transform(z, scales)


def register_rigid(fixed: Volume, moving: Volume, params: LinearParams | None = None) -> RigidTransform:
    """Recover the rigid transform minimizing the chosen metric."""
    params = params or LinearParams()
    _check_overlap(fixed, moving)
    center = _volume_center(fixed.grid)

    def make_transform(z, scales):
        p = z * scales
        return RigidTransform(rotation_from_euler(*p[:3]), p[3:], center)

    return _optimize_linear(fixed, moving, params, make_transform, np.zeros(6), 6, "rigid")


def register_affine(
    fixed: Volume,
    moving: Volume,
    params: LinearParams | None = None,
    init: RigidTransform | None = None,
) -> AffineTransform:
    """Affine registration, initialized from a rigid pre-alignment."""
    params = params or LinearParams()
    _check_overlap(fixed, moving)
    center = _volume_center(fixed.grid)
    if init is None:
        init = register_rigid(fixed, moving, params)
    M0 = init.matrix.copy()
    t0 = init.apply_points(center) - center  # translation about the new center

    def make_transform(z, scales):
        p = z * scales
        return AffineTransform(M0 + p[:9].reshape(3, 3), t0 + p[9:], center)

    return _optimize_linear(fixed, moving, params, make_transform, np.zeros(12), 12, "affine")


def world_gradient(data: np.ndarray, grid: ImageGrid) -> np.ndarray:
    """Central-difference spatial gradient in world-mm coordinates, shape (..., 3)."""
    g_idx = np.stack(np.gradient(np.asarray(data, dtype=np.float64)), axis=-1)
    A = grid.direction @ np.diag(grid.spacing)
    return g_idx @ np.linalg.inv(A)


def _warp_volume(vol: Volume, grid: ImageGrid, u: np.ndarray) -> np.ndarray:
    xyz = grid.world_mesh() + u
    idx = vol.grid.world_to_voxel(xyz)
    return sample_at_voxels(vol.data, idx, "linear")


def _demons_force(static: np.ndarray, warped: np.ndarray, grid: ImageGrid, kappa: float) -> np.ndarray:
    diff = static - warped
    grad = world_gradient(warped, grid)
    g2 = np.sum(grad * grad, axis=-1)
    denom = g2 + (diff * diff) / (kappa * kappa)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(denom > 1e-12, diff / denom, 0.0)
    return grad * scale[..., None]


def _smooth_vec(u: np.ndarray, sigma_vox: float) -> np.ndarray:
    if sigma_vox <= 0:
        return u
    out = np.empty_like(u)
    for a in range(3):
        out[..., a] = ndimage.gaussian_filter(u[..., a], sigma_vox)
    return out


def min_jacobian_det(field: DeformationField, foreground: np.ndarray | None = None) -> float:
    from .morphometry import jacobian_det

    det = jacobian_det(field)
    if foreground is not None:
        det = det[foreground]
    return float(det.min())


def register_diffeo(
    fixed: Volume,
    moving: Volume,
    params: DiffeoParams | None = None,
    prealign: AffineTransform | None = None,
) -> tuple[DeformationField, DeformationField, dict]:
    """Symmetric SVF registration; returns (forward, inverse, diagnostics).

    The forward field maps fixed-space points to moving-space points. When
    ``prealign`` is given, it is composed into the returned fields.
    """
    params = params or DiffeoParams()
    _check_overlap(fixed, moving)
    if prealign is not None:
        from .transforms import apply_transform

        moving = apply_transform(moving, prealign, fixed.grid, "linear")

    factors = params.pyramid_factors
    f_levels = _pyramid(fixed, factors, 1.0)
    m_levels = _pyramid(moving, factors, 1.0)

    v = None
    trace = []
    for (f_lvl, m_lvl, n_iter) in zip(f_levels, m_levels, params.iterations):
        grid = f_lvl.grid
        kappa = params.intensity_sigma * float(np.mean(grid.spacing))
        if v is None:
            v = np.zeros((*grid.dims, 3))
        else:
            idx = prev_grid.world_to_voxel(grid.world_mesh())
            v = np.stack([sample_at_voxels(v[..., a], idx, "linear") for a in range(3)], axis=-1)

        step = params.step
        phi = VelocityField(grid, v).exp(params.n_squarings)
        best_mse = float(np.mean((f_lvl.data - _warp_volume(m_lvl, grid, phi.displacements)) ** 2))
        for _ in range(n_iter):
            phi = VelocityField(grid, v).exp(params.n_squarings)
            phi_inv = VelocityField(grid, v).exp_inverse(params.n_squarings)
            warped_m = _warp_volume(m_lvl, grid, phi.displacements)
            warped_f = _warp_volume(f_lvl, grid, phi_inv.displacements)

            u_fwd = _demons_force(f_lvl.data.astype(np.float64), warped_m, grid, kappa)
            u_bwd = _demons_force(m_lvl.data.astype(np.float64), warped_f, grid, kappa)
            # pull the backward force into fixed space through phi
            xyz = grid.world_mesh() + phi.displacements
            idx = grid.world_to_voxel(xyz)
            u_bwd_pulled = np.stack(
                [sample_at_voxels(u_bwd[..., a], idx, "linear") for a in range(3)], axis=-1
            )
            update = 0.5 * (u_fwd - u_bwd_pulled)
            update = _smooth_vec(update, params.sigma_update_vox)

            v_new = _smooth_vec(v + step * update, params.sigma_total_vox)
            phi_new = VelocityField(grid, v_new).exp(params.n_squarings)
            mse = float(np.mean((f_lvl.data - _warp_volume(m_lvl, grid, phi_new.displacements)) ** 2))
            if mse <= best_mse * 1.0001:
                v = v_new
                best_mse = min(best_mse, mse)
                step = min(step * 1.05, 4.0 * params.step)
            else:
                step *= 0.5
                if step < 1e-3 * params.step:
                    break
            trace.append(mse)
        prev_grid = grid

    grid = fixed.grid
    sigma_total = params.sigma_total_vox
    for attempt in range(params.max_fold_retries + 1):
        vel = VelocityField(grid, v)
        fwd = vel.exp(params.n_squarings)
        inv = vel.exp_inverse(params.n_squarings)
        fg = fixed.data > 0
        if min_jacobian_det(fwd, fg) > 0 and min_jacobian_det(inv, fg) > 0:
            break
        if attempt == params.max_fold_retries:
            raise RegistrationError("could not produce a fold-free field")
        sigma_total *= 1.5
        v = _smooth_vec(v, sigma_total)

    diagnostics = {"mse_trace": trace, "final_mse": trace[-1] if trace else None}
    if prealign is not None:
        from .transforms import compose

        fwd = compose(prealign, fwd, grid=grid)
        inv = compose(inv, prealign.invert(), grid=grid)
    return fwd, inv, diagnostics
