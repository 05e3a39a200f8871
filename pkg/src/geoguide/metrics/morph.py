"""Morphological feature vectors and distribution metrics over them."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..grid import coordinate_field
from ..moments import extract_moments, principal_axes

log = logging.getLogger(__name__)

FEATURES_PER_LABEL = 7
ELONGATION_CAP = 1e6
_SINGULAR = 1e-12
_JITTER = 1e-6


def _foreground_moments(grids: np.ndarray):
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 5:
        raise ValueError("expected grids shaped (n, C, H, W, D)")
    return extract_moments(grids[:, 1:], coordinate_field(grids.shape[2:]))


def morph_vectors(grids: np.ndarray) -> np.ndarray:
    """Raw morph vectors ``(n, 7 * (C - 1))``.

    Per foreground label: mass, centroid (3) and the eigenvalues of the
    trace-normalized covariance sorted descending.  Empty labels contribute
    zeros so every entry stays finite.
    """
    m = _foreground_moments(grids)
    eig = np.linalg.eigvalsh(m.normalized_covariance)[..., ::-1]
    feats = np.concatenate([m.mass[..., None], m.centroid, eig], axis=-1)
    return feats.reshape(len(feats), -1)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, reference: np.ndarray) -> "Standardizer":
        reference = np.asarray(reference, dtype=np.float64)
        std = reference.std(axis=0)
        return cls(reference.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def morph_vector(grids: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Morph vectors z-scored by the statistics of ``reference`` (raw vectors of real data)."""
    raw = morph_vectors(grids)
    return Standardizer.fit(raw if reference is None else reference)(raw)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -1e-9 * max(1.0, abs(vals.max())):
        log.warning("clamping eigenvalue %.3g in matrix square root", vals.min())
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(real: np.ndarray, synth: np.ndarray) -> float:
    """``|mu_r - mu_s|^2 + tr(S_r + S_s - 2 (S_r S_s)^(1/2))`` for two sets of row vectors.

    The cross term uses ``tr sqrt(S_r^(1/2) S_s S_r^(1/2))``, which is symmetric
    PSD, so only symmetric eigendecompositions are needed.  When either
    covariance is singular, ``1e-6`` is added to both diagonals.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synth = np.atleast_2d(np.asarray(synth, dtype=np.float64))
    if real.shape[0] < 2 or synth.shape[0] < 2:
        raise ValueError("need at least 2 vectors per set")
    if real.shape[1] != synth.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_r, mu_s = real.mean(axis=0), synth.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    cov_s = np.atleast_2d(np.cov(synth, rowvar=False))
    if min(np.linalg.eigvalsh(cov_r)[0], np.linalg.eigvalsh(cov_s)[0]) < _SINGULAR:
        log.info("singular covariance; adding %.0e diagonal jitter", _JITTER)
        eye = _JITTER * np.eye(len(cov_r))
        cov_r, cov_s = cov_r + eye, cov_s + eye
    root_r = _psd_sqrt(cov_r)
    cross = np.trace(_psd_sqrt(root_r @ cov_s @ root_r))
    value = float(np.sum((mu_r - mu_s) ** 2) + np.trace(cov_r) + np.trace(cov_s) - 2.0 * cross)
    return max(value, 0.0)


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = cdist(x, x)
    # column 0 of the sorted row is the point itself
    return np.sort(d, axis=1)[:, k]


def _coverage(points: np.ndarray, manifold: np.ndarray, radii: np.ndarray) -> float:
    return float(np.mean(np.any(cdist(points, manifold) <= radii[None, :], axis=1)))


def precision_recall(real: np.ndarray, synth: np.ndarray, k: int = 5) -> tuple[float, float]:
    """Improved precision and recall with k-NN hyperspheres; boundary points count as inside."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if len(real) <= k or len(synth) <= k:
        raise ValueError(f"both sets need more than k={k} points")
    precision = _coverage(synth, real, _knn_radii(real, k))
    recall = _coverage(real, synth, _knn_radii(synth, k))
    return precision, recall


@dataclass(frozen=True)
class MorphRow:
    sample: int
    label: str
    empty: bool
    mass: float
    centroid_x: float
    largest_eigenvalue: float
    polar_angle: float  # radians, in [0, pi/2]
    elongation: float
    elongation_capped: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def morph_report(grids: np.ndarray, labels: tuple[str, ...] | None = None) -> list[MorphRow]:
    """Per sample and foreground label: mass, centroid x, orientation and elongation.

    Orientation is the polar angle ``arccos(|v_z|)`` of the covariance's
    principal axis, folded to ``[0, pi/2]`` because an axis has no sign.
    Elongation is the ratio of the two largest covariance eigenvalues; when
    the second is below 1e-12 it is reported as ``ELONGATION_CAP`` and flagged.
    """
    m = _foreground_moments(grids)
    n, e = m.mass.shape
    labels = labels[1:] if labels is not None else tuple(f"label{i}" for i in range(1, e + 1))
    rows = []
    for i in range(n):
        for k in range(e):
            if m.empty[i, k]:
                rows.append(MorphRow(i, labels[k], True, float(m.mass[i, k]), *([float("nan")] * 4), False))
                continue
            vals, vecs = principal_axes(m.covariance[i, k])
            capped = bool(vals[1] < _SINGULAR)
            elong = ELONGATION_CAP if capped else float(vals[0] / vals[1])
            angle = float(np.arccos(np.clip(abs(vecs[2, 0]), 0.0, 1.0)))
            rows.append(MorphRow(i, labels[k], False, float(m.mass[i, k]), float(m.centroid[i, k, 0]),
                                 float(vals[0]), angle, elong, capped))
    return rows
