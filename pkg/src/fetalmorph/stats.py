"""Voxelwise GLM with Freedman-Lane permutation inference and TFCE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import ImageGrid, Volume


@dataclass
class DesignMatrix:
    """Per-subject design: intercept + GA covariates + one tested predictor."""

    X: np.ndarray  # (n_subjects, n_columns)
    columns: list[str]
    tested: str

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ValueError("design shape does not match column names")
        if self.tested not in self.columns:
            raise ValueError(f"tested column {self.tested!r} not in design")
        r = np.linalg.matrix_rank(self.X)
        if r < self.X.shape[1]:
            bad = _collinear_columns(self.X, self.columns)
            raise ValueError(f"design matrix is rank deficient (suspect columns: {bad})")

    @property
    def contrast(self) -> np.ndarray:
        c = np.zeros(self.X.shape[1])
        c[self.columns.index(self.tested)] = 1.0
        return c


def _collinear_columns(X: np.ndarray, names: list[str]) -> list[str]:
    bad = []
    for j in range(X.shape[1]):
        rest = np.delete(X, j, axis=1)
        if np.linalg.matrix_rank(rest) == np.linalg.matrix_rank(X):
            bad.append(names[j])
    return bad


def design_from_records(records, predictor: str) -> DesignMatrix:
    """Build the paper-style design: GA covariates controlled, one predictor tested."""
    cols = ["intercept", "ga_pre_weeks", "ga_post_weeks", "ga_op_weeks"]
    rows = []
    for r in records:
        row = [1.0, r.ga_pre_weeks, r.ga_post_weeks, r.ga_op_weeks]
        if predictor == "lesion_type":
            row.append(1.0 if r.lesion_type == "MS" else 0.0)
        elif predictor == "ga_op_weeks":
            pass  # already a column; it becomes the tested one
        else:
            row.append(float(getattr(r, predictor)))
        rows.append(row)
    names = cols + ([] if predictor == "ga_op_weeks" else [predictor])
    return DesignMatrix(np.array(rows), names, predictor)


@dataclass
class StatResult:
    t_map: Volume
    tfce_map: Volume
    fwer_p_map: Volume
    n_permutations: int
    seed: int
    zero_variance_voxels: int = 0
    max_stat_null: np.ndarray = field(default=None, repr=False)


def glm_t_stats(Y: np.ndarray, X: np.ndarray, contrast: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """OLS t-statistics per column of Y (n_subjects x n_voxels).

    Returns (t, zero_variance_mask); voxels with zero residual variance get t=0.
    """
    n, p = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ Y
    resid = Y - X @ beta
    rss = np.sum(resid**2, axis=0)
    dof = n - p
    sigma2 = rss / dof
    denom2 = sigma2 * float(contrast @ XtX_inv @ contrast)
    zero_var = denom2 <= 1e-30
    t = np.zeros(Y.shape[1])
    np.divide(contrast @ beta, np.sqrt(np.where(zero_var, 1.0, denom2)), out=t, where=~zero_var)
    return t, zero_var


def glm_t_map(stack: np.ndarray, design: DesignMatrix, grid: ImageGrid) -> tuple[Volume, int]:
    """t-map over a (nx, ny, nz, n_subjects) stack."""
    n = stack.shape[-1]
    if design.X.shape[0] != n:
        raise ValueError("design rows must match stack size")
    if n <= design.X.shape[1] + 1:
        raise ValueError("too few subjects for the design")
    Y = stack.reshape(-1, n).T.astype(np.float64)
    t, zero_var = glm_t_stats(Y, design.X, design.contrast)
    return Volume(grid, t.reshape(stack.shape[:3])), int(zero_var.sum())


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def _tfce_positive(m: np.ndarray, E: float, H: float, dh: float, structure) -> np.ndarray:
    out = np.zeros_like(m, dtype=np.float64)
    hmax = float(m.max(initial=0.0))
    if hmax <= 0:
        return out
    h = dh
    while h <= hmax + 1e-12:
        mask = m >= h
        lab, n = ndimage.label(mask, structure=structure)
        if n == 0:
            break
        sizes = np.bincount(lab.ravel())
        out[mask] += (sizes[lab[mask]].astype(np.float64) ** E) * (h**H) * dh
        h += dh
    return out


def tfce(stat_map: Volume | np.ndarray, E: float = 0.5, H: float = 2.0, dh: float | None = None,
         connectivity: int = 6) -> Volume | np.ndarray:
    """Threshold-free cluster enhancement; negative values enhanced separately."""
    is_vol = isinstance(stat_map, Volume)
    m = stat_map.data.astype(np.float64) if is_vol else np.asarray(stat_map, dtype=np.float64)
    if dh is None:
        dh = float(np.abs(m).max()) / 100.0 if np.abs(m).max() > 0 else 1.0
    if dh <= 0:
        raise ValueError("dh must be positive")
    structure = _STRUCTURES[connectivity]
    out = _tfce_positive(np.maximum(m, 0.0), E, H, dh, structure)
    out -= _tfce_positive(np.maximum(-m, 0.0), E, H, dh, structure)
    return Volume(stat_map.grid, out) if is_vol else out


@dataclass
class TfceParams:
    E: float = 0.5
    H: float = 2.0
    dh: float | None = None  # None: max/100 per map
    connectivity: int = 6


def _permutations(n: int, n_perm: int, rng: np.random.Generator) -> tuple[list[np.ndarray], bool]:
    import math

    total = math.factorial(n)
    if n_perm >= total:
        from itertools import permutations as iperm

        return [np.array(p) for p in iperm(range(n))], True
    perms = [np.arange(n)]
    seen = {tuple(range(n))}
    while len(perms) < n_perm:
        p = rng.permutation(n)
        tp = tuple(p)
        if tp in seen:
            continue
        seen.add(tp)
        perms.append(p)
    return perms, False


def permutation_test(
    stack: np.ndarray,
    design: DesignMatrix,
    grid: ImageGrid,
    n_perm: int = 500,
    seed: int = 0,
    tfce_params: TfceParams | None = None,
) -> StatResult:
    """Freedman-Lane max-TFCE permutation test; two-sided FWER p-values.

    The identity permutation is always included, so p >= 1/(n_perm).
    """
    if n_perm < 100:
        raise ValueError("need at least 100 permutations")
    tp = tfce_params or TfceParams()
    n = stack.shape[-1]
    X = design.X
    c = design.contrast
    tested_idx = design.columns.index(design.tested)
    Z = np.delete(X, tested_idx, axis=1)

    Y = stack.reshape(-1, n).T.astype(np.float64)
    # nuisance-only fit; permutations act on its residuals
    Zpinv = np.linalg.pinv(Z)
    gamma = Zpinv @ Y
    Zg = Z @ gamma
    Ez = Y - Zg

    shape3 = stack.shape[:3]
    dh = tp.dh
    if dh is None:
        t_obs, zero_var = glm_t_stats(Y, X, c)
        dh = float(np.abs(t_obs).max()) / 100.0 if np.abs(t_obs).max() > 0 else 1.0

    def tfce_both(t_flat):
        m = t_flat.reshape(shape3)
        pos = _tfce_positive(np.maximum(m, 0.0), tp.E, tp.H, dh, _STRUCTURES[tp.connectivity])
        neg = _tfce_positive(np.maximum(-m, 0.0), tp.E, tp.H, dh, _STRUCTURES[tp.connectivity])
        return pos, neg

    rng = np.random.default_rng(seed)
    perms, exhaustive = _permutations(n, n_perm, rng)
    if exhaustive and len(perms) < n_perm:
        import warnings

        warnings.warn(
            f"only {len(perms)} distinct permutations available; enumerating exhaustively",
            stacklevel=2,
        )

    t_obs, zero_var = glm_t_stats(Y, X, c)
    pos_obs, neg_obs = tfce_both(t_obs)

    max_pos = np.empty(len(perms))
    max_neg = np.empty(len(perms))
    for k, p in enumerate(perms):
        Y_perm = Zg + Ez[p]
        t_perm, _ = glm_t_stats(Y_perm, X, c)
        pos, neg = tfce_both(t_perm)
        max_pos[k] = pos.max(initial=0.0)
        max_neg[k] = neg.max(initial=0.0)

    n_eff = len(perms)
    p_pos = (1 + np.sum(max_pos[None, None, None, :] >= pos_obs[..., None], axis=-1)) / (n_eff + 1)
    p_neg = (1 + np.sum(max_neg[None, None, None, :] >= neg_obs[..., None], axis=-1)) / (n_eff + 1)
    # two-sided: enhance both tails, Bonferroni-combine
    p_map = np.minimum(1.0, 2.0 * np.minimum(p_pos, p_neg))

    return StatResult(
        t_map=Volume(grid, t_obs.reshape(shape3)),
        tfce_map=Volume(grid, pos_obs - neg_obs),
        fwer_p_map=Volume(grid, p_map),
        n_permutations=n_eff,
        seed=seed,
        zero_variance_voxels=int(zero_var.sum()),
        max_stat_null=np.stack([max_pos, max_neg]),
    )
