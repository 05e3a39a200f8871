"""Point-cloud metrics: farthest point sampling, Sinkhorn divergence, MMD / COV / 1-NNA.

Clouds live in normalized voxel coordinates.  Distances between clouds are
debiased entropic-OT (Sinkhorn) divergences with squared Euclidean cost,
solved in the log domain with epsilon annealing, batched over cloud pairs
with torch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..grid import axis_ticks

log = logging.getLogger(__name__)

N_POINTS = 256
# squared diameter of the unit cube; also the distance charged when exactly one cloud is empty
MAX_COST = 3.0


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-3
    max_iter: int = 500
    tol: float = 1e-9
    anneal: float = 0.5
    chunk: int = 64


def occupied_points(mask: np.ndarray) -> np.ndarray:
    """Normalized coordinates of the nonzero voxels of a 3D mask, in C order."""
    idx = np.argwhere(np.asarray(mask) > 0.5)
    ticks = [axis_ticks(n) for n in np.shape(mask)]
    return np.stack([ticks[a][idx[:, a]] for a in range(3)], axis=1) if len(idx) else np.zeros((0, 3))


def farthest_point_sample(points: np.ndarray, n: int = N_POINTS) -> np.ndarray:
    """Greedy farthest point sampling of ``min(n, len(points))`` points.

    Starts from the point nearest the centroid; every tie goes to the lowest
    index, so the result is a deterministic function of the input order.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= n:
        return points.copy()
    first = int(np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    chosen = [first]
    dist = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen]


def label_clouds(grids: np.ndarray, n: int = N_POINTS) -> list[list[np.ndarray]]:
    """``clouds[label][sample]`` for every foreground label of grids ``(N, C, H, W, D)``."""
    grids = np.asarray(grids)
    return [[farthest_point_sample(occupied_points(g[c]), n) for g in grids] for c in range(1, grids.shape[1])]


# -- Sinkhorn ------------------------------------------------------------------------


def _pad(clouds: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    size = max(len(c) for c in clouds)
    x = torch.zeros(len(clouds), size, 3, dtype=torch.float64)
    logw = torch.full((len(clouds), size), -torch.inf, dtype=torch.float64)
    for i, c in enumerate(clouds):
        x[i, : len(c)] = torch.from_numpy(c)
        logw[i, : len(c)] = -np.log(len(c))
    return x, logw


def _softmin(eps: float, cost: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """``-eps * logsumexp_j(h_j - C_ij / eps)`` over the last axis."""
    return -eps * torch.logsumexp(h[:, None, :] - cost / eps, dim=2)


def _eps_ladder(cfg: SinkhornConfig) -> list[float]:
    ladder, e = [], MAX_COST
    while e > cfg.epsilon:
        ladder.append(e)
        e *= cfg.anneal
    return ladder + [cfg.epsilon]


def _sinkhorn(x, la, y, lb, cfg: SinkhornConfig, symmetric_self: bool = False):
    """Dual potentials and value of entropic OT between batched weighted clouds.

    Cross terms use alternating updates; self terms (``x is y``) use the
    averaged symmetric update on a single potential.  Iteration stops once
    the dual value at the target epsilon changes by less than ``tol`` for
    every pair, or after ``max_iter`` iterations at the target epsilon.
    Returns ``(value, converged)``.
    """
    cxy = torch.cdist(x, y) ** 2
    cyx = cxy.transpose(1, 2)
    ladder = _eps_ladder(cfg)
    f = torch.zeros(x.shape[:2], dtype=torch.float64)
    g = f if symmetric_self else torch.zeros(y.shape[:2], dtype=torch.float64)

    def step(eps, f, g):
        if symmetric_self:
            f = 0.5 * (f + _softmin(eps, cxy, lb + f / eps))
            return f, f
        f = _softmin(eps, cxy, lb + g / eps)
        return f, _softmin(eps, cyx, la + f / eps)

    for eps in ladder[:-1]:
        f, g = step(eps, f, g)
    value = _dot(la, f) + _dot(lb, g)
    converged = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(cfg.max_iter):
        f, g = step(cfg.epsilon, f, g)
        new = _dot(la, f) + _dot(lb, g)
        converged = (new - value).abs() < cfg.tol
        value = new
        if converged.all():
            break
    return value, converged


def _dot(logw: torch.Tensor, pot: torch.Tensor) -> torch.Tensor:
    w = logw.exp()
    return (w * torch.where(w > 0, pot, torch.zeros_like(pot))).sum(dim=1)


def _self_terms(clouds: list[np.ndarray], cfg: SinkhornConfig) -> np.ndarray:
    out = np.zeros(len(clouds))
    for s in range(0, len(clouds), cfg.chunk):
        part = clouds[s : s + cfg.chunk]
        x, lw = _pad(part)
        value, ok = _sinkhorn(x, lw, x, lw, cfg, symmetric_self=True)
        if not ok.all():
            log.warning("sinkhorn self-term did not converge for %d cloud(s)", int((~ok).sum()))
        out[s : s + len(part)] = value.numpy()
    return out


def _cross_terms(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: SinkhornConfig) -> tuple[np.ndarray, int]:
    out = np.zeros(len(pairs))
    unconverged = 0
    for s in range(0, len(pairs), cfg.chunk):
        part = pairs[s : s + cfg.chunk]
        x, la = _pad([p[0] for p in part])
        y, lb = _pad([p[1] for p in part])
        value, ok = _sinkhorn(x, la, y, lb, cfg)
        unconverged += int((~ok).sum())
        out[s : s + len(part)] = value.numpy()
    if unconverged:
        log.warning("sinkhorn did not converge for %d pair(s); using last iterate", unconverged)
    return out, unconverged


def sinkhorn_divergence(x: np.ndarray, y: np.ndarray, cfg: SinkhornConfig = SinkhornConfig()) -> float:
    """Debiased divergence ``OT(x, y) - OT(x, x)/2 - OT(y, y)/2`` between uniform clouds."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        return 0.0 if len(x) == len(y) else MAX_COST
    if np.array_equal(x, y):
        return 0.0
    # alternating updates are not symmetric in their arguments; a canonical
    # order makes the divergence exactly symmetric
    if (len(y), y.tobytes()) < (len(x), x.tobytes()):
        x, y = y, x
    self_xy = _self_terms([x, y], cfg)
    cross, _ = _cross_terms([(x, y)], cfg)
    return float(cross[0] - 0.5 * self_xy.sum())


def divergence_matrix(a: list[np.ndarray], b: list[np.ndarray] | None = None,
                      cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    """Pairwise Sinkhorn divergences; with ``b=None`` the symmetric matrix within ``a``."""
    same = b is None
    b = a if same else b
    self_a = _self_terms([c for c in a if len(c)], cfg)
    self_b = self_a if same else _self_terms([c for c in b if len(c)], cfg)
    sa = dict(zip([i for i, c in enumerate(a) if len(c)], self_a))
    sb = sa if same else dict(zip([j for j, c in enumerate(b) if len(c)], self_b))
    index = [(i, j) for i in range(len(a)) for j in range(i + 1 if same else 0, len(b))]
    out = np.zeros((len(a), len(b)))
    # identical clouds are exactly 0 apart rather than solver round-off
    solve = [(i, j) for i, j in index if len(a[i]) and len(b[j]) and not np.array_equal(a[i], b[j])]
    cross, _ = _cross_terms([(a[i], b[j]) for i, j in solve], cfg)
    for (i, j), c in zip(solve, cross):
        out[i, j] = c - 0.5 * (sa[i] + sb[j])
    for i, j in index:
        if not (len(a[i]) and len(b[j])):
            out[i, j] = 0.0 if len(a[i]) == len(b[j]) else MAX_COST
    if same:
        out = out + out.T
    return out


# -- set metrics ---------------------------------------------------------------------


def mmd_cov(d_rs: np.ndarray) -> tuple[float, float]:
    """MMD and coverage from a real-by-synthetic distance matrix."""
    mmd = float(d_rs.min(axis=1).mean())
    cov = len(np.unique(d_rs.argmin(axis=0))) / d_rs.shape[0]
    return mmd, float(cov)


def one_nna(d_rr: np.ndarray, d_ss: np.ndarray, d_rs: np.ndarray) -> float:
    """Leave-one-out 1-NN two-sample accuracy.

    A point scores 1 when all of its nearest neighbours are in its own set and
    0 when any tied nearest neighbour is in the other set, except that an exact
    duplicate across the sets (distance 0) scores 1/2: the two copies are
    indistinguishable, so either label is a coin flip.  Identical sets
    therefore score 0.5.
    """
    nr = len(d_rr)
    full = np.block([[d_rr, d_rs], [d_rs.T, d_ss]]).astype(np.float64)
    np.fill_diagonal(full, np.inf)
    is_real = np.arange(len(full)) < nr
    scores = np.empty(len(full))
    for i in range(len(full)):
        row = full[i]
        best = row.min()
        tied = row <= best
        other = tied & (is_real != is_real[i])
        if not other.any():
            scores[i] = 1.0
        elif best <= 0.0:
            scores[i] = 0.5
        else:
            scores[i] = 0.0
    return float(scores.mean())


@dataclass(frozen=True)
class PointCloudReport:
    mmd: float
    cov: float
    nna: float
    per_label: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"mmd": self.mmd, "cov": self.cov, "1-nna": self.nna, "per_label": self.per_label}


def pointcloud_metrics(
    real: np.ndarray,
    synth: np.ndarray,
    labels: tuple[str, ...] | None = None,
    n_points: int = N_POINTS,
    cfg: SinkhornConfig = SinkhornConfig(),
) -> PointCloudReport:
    """MMD, COV and 1-NNA between two sets of grids, computed per label and averaged."""
    real, synth = np.asarray(real), np.asarray(synth)
    channels = real.shape[1]
    labels = tuple(labels[1:]) if labels is not None else tuple(f"label{i}" for i in range(1, channels))
    rc, sc = label_clouds(real, n_points), label_clouds(synth, n_points)
    per_label = {}
    for name, r, s in zip(labels, rc, sc):
        d_rs = divergence_matrix(r, s, cfg)
        mmd, cov = mmd_cov(d_rs)
        nna = one_nna(divergence_matrix(r, None, cfg), divergence_matrix(s, None, cfg), d_rs)
        per_label[name] = {"mmd": mmd, "cov": cov, "1-nna": nna}
    mean = {k: float(np.mean([v[k] for v in per_label.values()])) for k in ("mmd", "cov", "1-nna")}
    return PointCloudReport(mean["mmd"], mean["cov"], mean["1-nna"], per_label)
