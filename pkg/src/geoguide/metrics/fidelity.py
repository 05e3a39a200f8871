"""Conditional fidelity: L1 distance between target and achieved moments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import coordinate_field, select_components
from ..loss import ConstraintSet
from ..moments import GeometricMoments, extract_moments

FAMILIES = ("size", "position", "shape")
# display multipliers used in ablation-style tables
DISPLAY_SCALE = {"size": 1e4, "position": 1e3, "shape": 1e3}


@dataclass(frozen=True)
class FidelityReport:
    """Per-sample L1 values per moment family plus summary statistics.

    ``per_sample[f][i]`` is the mean absolute error of sample ``i`` over the
    entries of family ``f`` across its non-empty components; NaN when every
    component of that sample is empty.
    """

    per_sample: dict[str, np.ndarray]
    excluded: dict[str, int]  # empty (sample, component) pairs left out

    def mean(self, family: str, display: bool = False) -> float:
        return self._stat(np.nanmean, family, display)

    def median(self, family: str, display: bool = False) -> float:
        return self._stat(np.nanmedian, family, display)

    def _stat(self, fn, family, display):
        v = self.per_sample[family]
        if np.all(np.isnan(v)):
            return float("nan")
        return float(fn(v)) * (DISPLAY_SCALE[family] if display else 1.0)

    def summary(self, display: bool = False) -> dict:
        return {
            f: {
                "mean": self.mean(f, display),
                "median": self.median(f, display),
                "excluded": self.excluded[f],
            }
            for f in FAMILIES
        } | {"display_scaled": display}


def sample_moments(grids: np.ndarray, cs: ConstraintSet) -> GeometricMoments:
    """Moments of each selected component of hardened grids ``(n, C, H, W, D)``."""
    grids = np.asarray(grids, dtype=np.float64)
    cs.selection.validate(grids.shape[1])
    return extract_moments(select_components(grids, cs.selection), coordinate_field(grids.shape[2:]))


def fidelity_from_moments(m: GeometricMoments, cs: ConstraintSet) -> FidelityReport:
    n = m.mass.shape[0]
    mass_t = np.broadcast_to(cs.mass, m.mass.shape)
    cen_t = np.broadcast_to(cs.centroid, m.centroid.shape)
    shp_t = np.broadcast_to(cs.shape, m.normalized_covariance.shape)
    ok = ~m.empty
    size = np.abs(m.mass - mass_t).mean(axis=-1)
    pos_err = np.abs(m.centroid - cen_t).mean(axis=-1)
    shp_err = np.abs(m.normalized_covariance - shp_t).mean(axis=(-2, -1))
    counts = ok.sum(axis=-1)
    with np.errstate(invalid="ignore"):
        position = np.where(counts > 0, (pos_err * ok).sum(axis=-1) / np.maximum(counts, 1), np.nan)
        shape = np.where(counts > 0, (shp_err * ok).sum(axis=-1) / np.maximum(counts, 1), np.nan)
    empty = int((~ok).sum())
    return FidelityReport(
        {"size": size.reshape(n), "position": position.reshape(n), "shape": shape.reshape(n)},
        {"size": 0, "position": empty, "shape": empty},
    )


def conditional_fidelity(grids: np.ndarray, cs: ConstraintSet) -> FidelityReport:
    """L1 fidelity of samples against their targets (one target per sample or shared)."""
    grids = np.asarray(grids)
    if cs.batch_shape not in ((), (len(grids),)):
        raise ValueError(f"constraint batch {cs.batch_shape} does not match {len(grids)} samples")
    return fidelity_from_moments(sample_moments(grids, cs), cs)
