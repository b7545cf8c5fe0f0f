"""Groupwise template construction with shape unbiasing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Volume
from .register import DiffeoParams, LinearParams, register_affine, register_diffeo, register_rigid, _smooth_vec
from .resample import resample
from .transforms import AffineTransform, DeformationField, apply_transform


@dataclass
class TemplateResult:
    template: Volume
    per_subject_affines: list[AffineTransform]
    per_subject_fields: list[DeformationField]
    convergence_trace: list[float] = field(default_factory=list)


def build_template(
    vols: list[Volume],
    n_iters: int = 4,
    linear_params: LinearParams | None = None,
    diffeo_params: DiffeoParams | None = None,
    trimmed_fraction: float = 0.0,
) -> TemplateResult:
    """Iterative register-average-unbias template construction.

    Each iteration registers every input to the current template (affine +
    diffeo), averages the warped intensities, and moves the template by the
    inverse of the mean displacement so its shape stays unbiased.
    """
    if len(vols) < 2:
        raise ValueError("template construction needs at least 2 volumes")
    linear_params = linear_params or LinearParams()
    diffeo_params = diffeo_params or DiffeoParams()

    # deterministic seed: rigid-align everyone to the first volume and average
    ref = vols[0]
    aligned = [ref.data.astype(np.float64)]
    for v in vols[1:]:
        t = register_rigid(ref, v, linear_params)
        aligned.append(apply_transform(v, t, ref.grid, "linear").data.astype(np.float64))
    template = Volume(ref.grid, np.mean(aligned, axis=0))

    affines: list[AffineTransform] = []
    fields: list[DeformationField] = []
    trace: list[float] = []
    for _ in range(n_iters):
        warped = []
        affines, fields, inv_fields = [], [], []
        for i, v in enumerate(vols):
            try:
                aff = register_affine(template, v, linear_params)
                fwd, inv, _ = register_diffeo(template, v, diffeo_params, prealign=aff)
            except Exception as exc:  # noqa: BLE001 - reported with the member index
                raise RuntimeError(f"registration of template member {i} failed: {exc}") from exc
            affines.append(aff)
            fields.append(fwd)
            inv_fields.append(inv)
            warped.append(apply_transform(v, fwd, template.grid, "linear").data.astype(np.float64))

        if trimmed_fraction > 0:
            arr = np.sort(np.stack(warped), axis=0)
            k = int(round(trimmed_fraction * len(warped)))
            avg = arr[k : len(warped) - k or None].mean(axis=0)
        else:
            avg = np.mean(warped, axis=0)

        mean_u = np.mean([f.displacements for f in fields], axis=0)
        trace.append(float(np.mean(np.linalg.norm(mean_u, axis=-1))))

        # shape unbiasing: push the averaged template along -mean displacement
        shifted = DeformationField(template.grid, _smooth_vec(-mean_u, 1.0))
        template = apply_transform(Volume(template.grid, avg), shifted, template.grid, "linear")

    return TemplateResult(template, affines, fields, trace)
