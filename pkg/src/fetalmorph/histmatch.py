"""Quantile-landmark histogram matching."""

from __future__ import annotations

import numpy as np

from .grid import Volume


def _landmarks(data: np.ndarray, n_landmarks: int, fg_threshold: float) -> np.ndarray:
    fg = data[data > fg_threshold]
    if fg.size == 0 or np.ptp(fg) == 0:
        raise ValueError("histogram matching needs a non-constant foreground")
    q = np.linspace(0.0, 100.0, n_landmarks)
    return np.percentile(fg.astype(np.float64), q)


def histogram_match(
    source: Volume,
    reference: Volume,
    n_landmarks: int = 11,
    fg_threshold: float = 0.0,
) -> Volume:
    """Monotone piecewise-linear remap of source foreground intensities.

    Landmarks are quantiles (0%..100% in equal steps) of the strictly-foreground
    voxels; background voxels pass through unchanged.
    """
    if n_landmarks < 2:
        raise ValueError("need at least 2 landmarks")
    src_lm = _landmarks(source.data, n_landmarks, fg_threshold)
    ref_lm = _landmarks(reference.data, n_landmarks, fg_threshold)
    # np.interp needs strictly increasing x; collapse ties
    keep = np.concatenate([[True], np.diff(src_lm) > 0])
    src_lm, ref_lm = src_lm[keep], ref_lm[keep]

    out = source.data.astype(np.float64).copy()
    fg = source.data > fg_threshold
    out[fg] = np.interp(out[fg], src_lm, ref_lm)
    return Volume(source.grid, out)
