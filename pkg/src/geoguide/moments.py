"""Geometric moments of occupancy fields and their reverse-mode derivatives.

For a component field ``w(v)`` over ``N`` voxels at normalized positions
``p(v)``::

    mass        M  = sum(w) / N                       (volume fraction)
    centroid    C  = sum(w p) / (N m)
    covariance  S  = sum(w p p^T) / (N m) - C C^T
    shape       Sn = S / tr(S)

where ``m = M + stabilizer``.  Measurement uses ``stabilizer=0``; the guidance
path passes :data:`STABILIZER` so the quotients stay finite on near-empty
components.  ``tr(S)`` equals the eigenvalue sum, so no eigendecomposition is
needed on the differentiable path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

STABILIZER = 1e-8
EMPTY_MASS = 3e-5  # about one voxel at 32^3
_TRACE_FLOOR = 1e-300


class MomentError(ValueError):
    pass


@dataclass(frozen=True)
class GeometricMoments:
    """Per-component moments; leading axes ``(..., E)`` follow the input fields."""

    mass: np.ndarray  # (..., E)
    centroid: np.ndarray  # (..., E, 3)
    covariance: np.ndarray  # (..., E, 3, 3)
    normalized_covariance: np.ndarray  # (..., E, 3, 3)
    empty: np.ndarray  # (..., E) bool

    def component(self, k: int) -> "GeometricMoments":
        return GeometricMoments(
            self.mass[..., k],
            self.centroid[..., k, :],
            self.covariance[..., k, :, :],
            self.normalized_covariance[..., k, :, :],
            self.empty[..., k],
        )

    def to_dict(self) -> dict:
        return {
            "mass": self.mass.tolist(),
            "centroid": self.centroid.tolist(),
            "covariance": self.covariance.tolist(),
            "normalized_covariance": self.normalized_covariance.tolist(),
            "empty": self.empty.tolist(),
        }


@dataclass
class _Partials:
    # raw sums divided by the voxel count
    p0: np.ndarray  # (..., E)
    p1: np.ndarray  # (..., E, 3)
    p2: np.ndarray  # (..., E, 3, 3)
    m: np.ndarray  # stabilized mass
    centroid: np.ndarray
    cov: np.ndarray
    trace: np.ndarray


def _flat_coords(coords: np.ndarray, spatial: tuple[int, ...]) -> np.ndarray:
    if coords.shape != (*spatial, 3):
        raise MomentError(f"coordinate field {coords.shape} does not match spatial shape {spatial}")
    return coords.reshape(-1, 3)


@lru_cache(maxsize=16)
def _lattice(spatial: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard coordinate field, integer offsets ``2i - (N - 1)`` and the pairwise
    divisors ``4 (N_a - 1)(N_b - 1)`` that map offset products back to coordinates."""
    ticks = [np.full(1, 0.5) if n == 1 else np.arange(n) / (n - 1) for n in spatial]
    coords = np.stack(np.meshgrid(*ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    offsets = [np.arange(n, dtype=np.float64) * 2 - (n - 1) for n in spatial]
    u = np.stack(np.meshgrid(*offsets, indexing="ij"), axis=-1).reshape(-1, 3)
    half = np.array([2.0 * (n - 1) if n > 1 else 1.0 for n in spatial])  # offsets are 0 on unit axes
    for a in (coords, u, half):
        a.setflags(write=False)
    return coords, u, half


def _partials(fields: np.ndarray, coords: np.ndarray, stabilizer: float) -> _Partials:
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim < 4:
        raise MomentError("fields must have shape (..., E, H, W, D)")
    spatial = tuple(fields.shape[-3:])
    p = _flat_coords(np.asarray(coords, dtype=np.float64), spatial)
    n = p.shape[0]
    w = fields.reshape(*fields.shape[:-3], n)
    p0 = w.sum(axis=-1) / n
    p1 = w @ p / n
    pp = (p[:, :, None] * p[:, None, :]).reshape(n, 9)
    p2 = (w @ pp / n).reshape(*w.shape[:-1], 3, 3)
    m = p0 + stabilizer
    lattice, u, half = _lattice(spatial)
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.array_equal(p, lattice):
            # centred integer offsets: sums are exact for binary fields, the full
            # grid lands exactly on the centre and the covariance avoids the
            # cancellation in E[pp] - C C^T
            den = w.sum(axis=-1) + stabilizer * n
            mu = (w @ u) / den[..., None]
            uu = (u[:, :, None] * u[:, None, :]).reshape(n, 9)
            s2 = (w @ uu).reshape(*w.shape[:-1], 3, 3)
            div = np.outer(half, half)
            centroid = 0.5 + mu / half
            cov = s2 / (den[..., None, None] * div) - mu[..., :, None] * mu[..., None, :] / div
        else:
            centroid = p1 / m[..., None]
            cov = p2 / m[..., None, None] - centroid[..., :, None] * centroid[..., None, :]
    trace = np.trace(cov, axis1=-2, axis2=-1)
    return _Partials(p0, p1, p2, m, centroid, cov, trace)


def extract_moments(
    fields: np.ndarray,
    coords: np.ndarray,
    stabilizer: float = 0.0,
    empty_mass: float = EMPTY_MASS,
) -> GeometricMoments:
    """Mass, centroid, covariance and trace-normalized covariance per component.

    Components whose mass falls below ``empty_mass`` are flagged empty and
    report zeros for the position and shape moments.
    """
    part = _partials(fields, coords, stabilizer)
    empty = part.p0 < empty_mass
    safe_trace = np.where(np.abs(part.trace) > _TRACE_FLOOR, part.trace, 1.0)
    shape = part.cov / safe_trace[..., None, None]
    zero3 = np.zeros(3)
    centroid = np.where(empty[..., None], zero3, part.centroid)
    cov = np.where(empty[..., None, None], 0.0, part.cov)
    shape = np.where(empty[..., None, None], 0.0, shape)
    return GeometricMoments(part.p0.copy(), centroid, cov, shape, empty)


def moment_gradients(
    fields: np.ndarray,
    coords: np.ndarray,
    mass_cot: np.ndarray | None = None,
    centroid_cot: np.ndarray | None = None,
    covariance_cot: np.ndarray | None = None,
    shape_cot: np.ndarray | None = None,
    stabilizer: float = 0.0,
    empty_mass: float = EMPTY_MASS,
) -> np.ndarray:
    """Vector-Jacobian product of :func:`extract_moments` w.r.t. ``fields``.

    Each cotangent matches the shape of the corresponding moment; ``None`` means
    zero.  The result has the shape of ``fields``.  Because every moment is a
    function of the three raw sums, the gradient at voxel ``v`` is the
    quadratic ``(a + b.p(v) + p(v)^T Q p(v)) / N`` per component.
    """
    fields = np.asarray(fields, dtype=np.float64)
    part = _partials(fields, coords, stabilizer)
    lead = part.p0.shape
    g_m = np.zeros(lead)
    g_c = np.zeros((*lead, 3))
    g_s = np.zeros((*lead, 3, 3))
    g_p0 = np.zeros(lead) if mass_cot is None else np.broadcast_to(mass_cot, lead).astype(np.float64)

    geometric = [c for c in (centroid_cot, covariance_cot, shape_cot) if c is not None]
    if geometric:
        empty = part.p0 < empty_mass
        touched = np.zeros(lead, dtype=bool)
        for cot in geometric:
            cot = np.asarray(cot, dtype=np.float64)
            touched |= np.abs(cot).reshape(*lead, -1).sum(axis=-1) > 0
        if np.any(empty & touched):
            raise MomentError("nonzero position/shape cotangent on an empty component; gate it first")

    if shape_cot is not None:
        g_n = np.broadcast_to(shape_cot, (*lead, 3, 3))
        t = part.trace[..., None, None]
        inner = (g_n * part.cov).sum(axis=(-2, -1))[..., None, None]
        eye = np.eye(3)
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = g_n / t - inner / t**2 * eye
        g_s = g_s + np.where(np.isfinite(contrib), contrib, 0.0)
    if covariance_cot is not None:
        g_s = g_s + np.broadcast_to(covariance_cot, (*lead, 3, 3))

    m = part.m
    # zero-mass components without geometric cotangents produce 0/0 below
    with np.errstate(divide="ignore", invalid="ignore"):
        # S = p2/m - C C^T
        g_p2 = g_s / m[..., None, None]
        g_m = g_m - (g_s * part.p2).sum(axis=(-2, -1)) / m**2
        centroid = np.nan_to_num(part.centroid, nan=0.0, posinf=0.0, neginf=0.0)
        g_c = g_c - np.einsum("...ij,...j->...i", g_s + np.swapaxes(g_s, -1, -2), centroid)
        if centroid_cot is not None:
            g_c = g_c + np.broadcast_to(centroid_cot, (*lead, 3))
        # C = p1/m
        g_p1 = g_c / m[..., None]
        g_m = g_m - (g_c * part.p1).sum(axis=-1) / m**2
    g_p1 = np.nan_to_num(g_p1, nan=0.0, posinf=0.0, neginf=0.0)
    g_p2 = np.nan_to_num(g_p2, nan=0.0, posinf=0.0, neginf=0.0)
    g_p0 = g_p0 + np.nan_to_num(g_m, nan=0.0, posinf=0.0, neginf=0.0)

    spatial = fields.shape[-3:]
    p = _flat_coords(np.asarray(coords, dtype=np.float64), spatial)
    n = p.shape[0]
    pp = (p[:, :, None] * p[:, None, :]).reshape(n, 9)
    g = (
        g_p0[..., None]
        + g_p1 @ p.T
        + g_p2.reshape(*lead, 9) @ pp.T
    ) / n
    return g.reshape(fields.shape)


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray  # (3,)
    semi_axes: np.ndarray  # (3,) descending
    rotation: np.ndarray  # (3, 3), columns are the axes
    degenerate: tuple[bool, bool, bool] = (False, False, False)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "semi_axes": self.semi_axes.tolist(),
            "rotation": self.rotation.tolist(),
            "degenerate": list(self.degenerate),
        }


def principal_axes(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and right-handed eigenvector columns of a 3x3 matrix.

    Sign rule: the largest-magnitude entry of the first two columns is made
    positive (ties to the lowest index); the third column is their cross
    product, which fixes ``det = +1``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    for j in range(2):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, j] = -col
    vecs[:, 2] = np.cross(vecs[:, 0], vecs[:, 1])
    return vals, vecs


def ellipsoid_from_moments(m: GeometricMoments, component: int = 0) -> Ellipsoid:
    """Uniform solid ellipsoid with the component's centroid and covariance.

    A solid ellipsoid with semi-axis ``a`` along an eigenvector has variance
    ``a^2 / 5`` along it, so ``a = sqrt(5 * lambda)``.
    """
    mc = m.component(component) if np.ndim(m.mass) > 0 else m
    if bool(mc.empty):
        raise MomentError(f"component {component} is empty")
    vals, vecs = principal_axes(mc.covariance)
    if vals[-1] < -1e-9:
        raise MomentError(f"covariance is not PSD (min eigenvalue {vals[-1]:.3g})")
    degenerate = tuple(bool(v < 1e-12) for v in vals)
    semi = np.sqrt(5.0 * np.clip(vals, 0.0, None))
    return Ellipsoid(np.asarray(mc.centroid, dtype=np.float64).copy(), semi, vecs, degenerate)
