"""Synthetic longitudinal fetal-brain phantoms with analytic ground truth.

A phantom is a smooth brain ellipsoid containing two lateral-ventricle-like
superellipsoid lobes plus a thin bright CSF rim. Lobe semi-axes are solved
analytically from the requested ventricle volume, so voxel-count volumetry
can be checked against an exact oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn

from .grid import LABEL_NAMES, VENTRICLE_LABEL, ImageGrid, LabelMap, Volume, centered_grid

PARENCHYMA_INTENSITY = 0.55
VENTRICLE_INTENSITY = 1.0
CSF_RIM_INTENSITY = 0.95
EDGE_WIDTH_MM = 0.7

# lobe semi-axis proportions (x: left-right, y: anterior-posterior, z: up-down)
_LOBE_RATIOS = np.array([0.50, 0.85, 0.60])
_LOBE_GAP_MM = 0.4  # midline separation between the two lobes
_BRAIN_RATIOS = np.array([1.0, 0.92, 0.86])


@dataclass
class SubjectRecord:
    subject_id: str
    ga_pre_weeks: float
    ga_op_weeks: float
    ga_post_weeks: float
    lesion_area_mm2: float
    lesion_type: str  # MMC | MS
    lesion_location: int  # ordinal vertebral level
    true_daily_growth_mm3: float = 0.0
    pre_path: str = ""
    post_path: str = ""

    def __post_init__(self):
        if not (self.ga_pre_weeks < self.ga_op_weeks < self.ga_post_weeks):
            raise ValueError("need ga_pre < ga_op < ga_post")
        if self.lesion_type not in ("MMC", "MS"):
            raise ValueError(f"lesion_type must be MMC or MS, got {self.lesion_type!r}")

    @property
    def delta_days(self) -> float:
        return 7.0 * (self.ga_post_weeks - self.ga_pre_weeks)


@dataclass
class PhantomSpec:
    seed: int = 0
    ga_pre: float = 23.2
    ga_op: float = 25.0
    ga_post: float = 27.7
    base_radius_mm: float = 15.0
    ventricle_volume_pre_mm3: float = 1500.0
    daily_growth_mm3: float = 60.0
    asymmetry: float = 0.0
    lesion_area_mm2: float = 450.0
    lesion_type: str = "MMC"
    lesion_location: int = 3
    planted_effect: float = 0.0
    grid_dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 0.5
    lobe_exponent: float = 2.0

    def __post_init__(self):
        if not (self.ga_pre < self.ga_op < self.ga_post):
            raise ValueError("need ga_pre < ga_op < ga_post")
        if self.base_radius_mm <= 0 or self.ventricle_volume_pre_mm3 <= 0:
            raise ValueError("radii and volumes must be positive")
        if not 0.0 <= self.asymmetry <= 1.0:
            raise ValueError("asymmetry must lie in [0, 1]")


@dataclass
class PhantomPair:
    pre_volume: Volume
    pre_labels: LabelMap
    post_volume: Volume
    post_labels: LabelMap
    pre_brain_mask: LabelMap
    post_brain_mask: LabelMap
    true_daily_growth_mm3: float
    record: SubjectRecord
    spec: PhantomSpec = field(repr=False, default=None)


def superellipsoid_volume(semi_axes, exponent: float) -> float:
    """Exact volume of |x/a|^p + |y/b|^p + |z/c|^p <= 1."""
    a, b, c = semi_axes
    p = exponent
    return 8.0 * a * b * c * gamma_fn(1 + 1 / p) ** 3 / gamma_fn(1 + 3 / p)


def _lobe_scale(volume_mm3: float, exponent: float) -> float:
    unit = superellipsoid_volume(_LOBE_RATIOS, exponent)
    return (volume_mm3 / unit) ** (1.0 / 3.0)


def _superellipsoid_rho(xyz: np.ndarray, center, semi_axes, exponent: float) -> np.ndarray:
    rel = np.abs((xyz - np.asarray(center)) / np.asarray(semi_axes))
    return np.power(np.sum(rel**exponent, axis=-1), 1.0 / exponent)


def _smooth_inhomogeneity(dims, rng: np.random.Generator, amplitude: float = 0.12) -> np.ndarray:
    """Smooth multiplicative texture; also anchors orientation for registration."""
    from scipy import ndimage

    n = 8
    coarse = rng.standard_normal((n, n, n))
    zoom = [d / n for d in dims]
    f = ndimage.zoom(coarse, zoom, order=3, mode="nearest")[: dims[0], : dims[1], : dims[2]]
    f = f / (np.abs(f).max() + 1e-12)
    return 1.0 + amplitude * f


def _render(
    grid: ImageGrid,
    brain_axes: np.ndarray,
    lobe_specs: list[tuple[np.ndarray, np.ndarray]],
    exponent: float,
    inhomogeneity: np.ndarray,
) -> tuple[Volume, LabelMap, LabelMap]:
    xyz = grid.world_mesh()
    edge = EDGE_WIDTH_MM

    rho_brain = _superellipsoid_rho(xyz, (0, 0, 0), brain_axes, 2.0)
    # distance-like coordinate so the sigmoid edge width is in mm
    d_brain = (1.0 - rho_brain) * brain_axes.min()
    brain_soft = 1.0 / (1.0 + np.exp(-d_brain / edge))

    vent_soft = np.zeros(grid.dims)
    vent_exact = np.zeros(grid.dims, dtype=bool)
    for center, axes in lobe_specs:
        rho = _superellipsoid_rho(xyz, center, axes, exponent)
        d = (1.0 - rho) * axes.min()
        vent_soft = np.maximum(vent_soft, 1.0 / (1.0 + np.exp(-d / edge)))
        vent_exact |= rho <= 1.0

    rim = np.clip(1.0 / (1.0 + np.exp(-((rho_brain - 0.90) * brain_axes.min()) / edge)), 0, 1)
    tissue = PARENCHYMA_INTENSITY + (CSF_RIM_INTENSITY - PARENCHYMA_INTENSITY) * rim
    intensity = brain_soft * (tissue + (VENTRICLE_INTENSITY - tissue) * vent_soft)
    intensity *= inhomogeneity

    vol = Volume(grid, intensity)
    labels = LabelMap(grid, vent_exact.astype(np.int16) * VENTRICLE_LABEL, dict(LABEL_NAMES))
    brain = LabelMap(grid, (rho_brain <= 1.0).astype(np.int16), {1: "brain"})
    return vol, labels, brain


def _lobes_for_volume(total_mm3: float, asymmetry: float, brain_axes, exponent: float):
    frac = np.array([0.5 * (1 + asymmetry), 0.5 * (1 - asymmetry)])
    frac = frac[frac > 0]
    signs = [1.0, -1.0][: len(frac)]
    lobes = []
    for f, s in zip(frac, signs):
        scale = _lobe_scale(total_mm3 * f, exponent)
        axes = _LOBE_RATIOS * scale
        # keep the lobes clear of the midline so their union volume stays analytic
        center = np.array([s * (axes[0] + _LOBE_GAP_MM), 0.0, 0.0])
        lobes.append((center, axes))
    return lobes


def _check_fit(labels: LabelMap, brain_axes, grid: ImageGrid):
    xyz = grid.world_mesh()[labels.data > 0]
    if xyz.size == 0:
        raise ValueError("requested ventricle volume produced no voxels")
    rho = _superellipsoid_rho(xyz, (0, 0, 0), brain_axes, 2.0)
    if rho.max() > 0.97:
        raise ValueError("requested ventricle volume exceeds the brain envelope")


def generate_phantom(spec: PhantomSpec) -> PhantomPair:
    """Deterministic pre/post phantom pair with known ventricle growth."""
    rng = np.random.default_rng(spec.seed)
    grid = centered_grid(spec.grid_dims, (spec.spacing_mm,) * 3)
    brain_axes = _BRAIN_RATIOS * spec.base_radius_mm

    growth_mod = 1.0 + spec.planted_effect * (spec.lesion_area_mm2 - 450.0) / 150.0
    daily = max(spec.daily_growth_mm3 * growth_mod, 0.0)
    delta_days = 7.0 * (spec.ga_post - spec.ga_pre)
    v_pre = spec.ventricle_volume_pre_mm3
    v_post = v_pre + daily * delta_days

    brain_volume = superellipsoid_volume(brain_axes, 2.0)
    if v_post > 0.55 * brain_volume:
        raise ValueError(
            f"ventricle volume {v_post:.0f} mm^3 exceeds brain capacity ({brain_volume:.0f} mm^3)"
        )

    inhom = _smooth_inhomogeneity(grid.dims, rng)
    pre_vol, pre_lab, pre_brain = _render(
        grid, brain_axes, _lobes_for_volume(v_pre, spec.asymmetry, brain_axes, spec.lobe_exponent),
        spec.lobe_exponent, inhom,
    )
    post_vol, post_lab, post_brain = _render(
        grid, brain_axes, _lobes_for_volume(v_post, spec.asymmetry, brain_axes, spec.lobe_exponent),
        spec.lobe_exponent, inhom,
    )
    _check_fit(post_lab, brain_axes, grid)

    record = SubjectRecord(
        subject_id=f"sub-{spec.seed:04d}",
        ga_pre_weeks=spec.ga_pre,
        ga_op_weeks=spec.ga_op,
        ga_post_weeks=spec.ga_post,
        lesion_area_mm2=spec.lesion_area_mm2,
        lesion_type=spec.lesion_type,
        lesion_location=spec.lesion_location,
        true_daily_growth_mm3=daily,
    )
    return PhantomPair(pre_vol, pre_lab, post_vol, post_lab, pre_brain, post_brain, daily, record, spec)


DEFAULT_COVARIATE_DISTRIBUTIONS = {
    "ga_pre": (23.2, 1.0),
    "op_delay_weeks": (1.8, 0.3),
    "post_delay_weeks": (2.7, 0.5),
    "lesion_area_mm2": (450.0, 150.0),
    "mmc_fraction": 0.7,
    "ventricle_volume_pre_mm3": (1500.0, 350.0),
    "daily_growth_mm3": (55.0, 20.0),
}


def generate_cohort(
    n: int,
    covariate_distributions: dict | None = None,
    planted_effect: float = 0.0,
    seed: int = 0,
    make_volumes: bool = True,
    **spec_overrides,
) -> list[PhantomPair]:
    """Sample ``n`` phantom subjects; covariates are growth-independent at null."""
    if n < 3:
        raise ValueError("cohort needs at least 3 subjects")
    dist = dict(DEFAULT_COVARIATE_DISTRIBUTIONS)
    dist.update(covariate_distributions or {})
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        ga_pre = float(np.clip(rng.normal(*dist["ga_pre"]), 20.5, 26.0))
        ga_op = ga_pre + float(np.clip(rng.normal(*dist["op_delay_weeks"]), 0.3, 4.0))
        ga_post = ga_op + float(np.clip(rng.normal(*dist["post_delay_weeks"]), 0.3, 5.0))
        spec = PhantomSpec(
            seed=seed * 100_003 + i,
            ga_pre=ga_pre,
            ga_op=ga_op,
            ga_post=ga_post,
            ventricle_volume_pre_mm3=float(
                np.clip(rng.normal(*dist["ventricle_volume_pre_mm3"]), 400.0, 4000.0)
            ),
            daily_growth_mm3=float(np.clip(rng.normal(*dist["daily_growth_mm3"]), 0.0, 200.0)),
            asymmetry=float(np.clip(rng.uniform(0.0, 0.15), 0, 1)),
            lesion_area_mm2=float(np.clip(rng.normal(*dist["lesion_area_mm2"]), 50.0, 1200.0)),
            lesion_type="MMC" if rng.random() < dist["mmc_fraction"] else "MS",
            lesion_location=int(rng.integers(1, 6)),
            planted_effect=planted_effect,
            **spec_overrides,
        )
        if make_volumes:
            pair = generate_phantom(spec)
        else:
            # covariate/growth bookkeeping only (Monte Carlo use)
            growth_mod = 1.0 + planted_effect * (spec.lesion_area_mm2 - 450.0) / 150.0
            daily = max(spec.daily_growth_mm3 * growth_mod, 0.0)
            record = SubjectRecord(
                subject_id=f"sub-{spec.seed:04d}",
                ga_pre_weeks=ga_pre,
                ga_op_weeks=ga_op,
                ga_post_weeks=ga_post,
                lesion_area_mm2=spec.lesion_area_mm2,
                lesion_type=spec.lesion_type,
                lesion_location=spec.lesion_location,
                true_daily_growth_mm3=daily,
            )
            pair = PhantomPair(None, None, None, None, None, None, daily, record, spec)
        pair.record.subject_id = f"sub-{i:03d}"
        pairs.append(pair)
    return pairs


COHORT_CSV_COLUMNS = [
    "subject_id",
    "ga_pre_weeks",
    "ga_op_weeks",
    "ga_post_weeks",
    "lesion_area_mm2",
    "lesion_type",
    "lesion_location",
    "true_daily_growth_mm3",
    "pre_path",
    "post_path",
]


def write_cohort_csv(records: list[SubjectRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COHORT_CSV_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({c: getattr(r, c) for c in COHORT_CSV_COLUMNS})


def read_cohort_csv(path) -> list[SubjectRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    ga_pre_weeks=float(row["ga_pre_weeks"]),
                    ga_op_weeks=float(row["ga_op_weeks"]),
                    ga_post_weeks=float(row["ga_post_weeks"]),
                    lesion_area_mm2=float(row["lesion_area_mm2"]),
                    lesion_type=row["lesion_type"],
                    lesion_location=int(row["lesion_location"]),
                    true_daily_growth_mm3=float(row.get("true_daily_growth_mm3") or 0.0),
                    pre_path=row.get("pre_path", ""),
                    post_path=row.get("post_path", ""),
                )
            )
    return records
