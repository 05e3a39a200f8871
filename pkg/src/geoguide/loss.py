"""Composite geometric loss over constrained components and its gradient w.r.t. a grid.

``L_geom = l0 * L_size + l1 * L_pos + l2 * L_shape`` where each term is the mean
squared error over its active entries (1 per mass, 3 per centroid, all 9 per
normalized covariance).  Position and shape terms of components whose mass is
below :data:`geoguide.moments.EMPTY_MASS` are gated to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import (
    DEFAULT_TEMPERATURE,
    ComponentSelection,
    LabelGrid,
    coordinate_field,
    load_vgf,
    select_components,
    select_components_vjp,
    soft_binarize,
    soft_binarize_vjp,
)
from .moments import EMPTY_MASS, STABILIZER, GeometricMoments, extract_moments, moment_gradients

DEFAULT_LAMBDAS = (1e7, 1e5, 1e4)


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    """Targets for E component groups.

    Target arrays may carry leading batch axes (one target per sample); the
    ``*_on`` flags are per group and shared.
    """

    selection: ComponentSelection
    mass: np.ndarray  # (..., E)
    centroid: np.ndarray  # (..., E, 3)
    shape: np.ndarray  # (..., E, 3, 3)
    mass_on: np.ndarray  # (E,)
    centroid_on: np.ndarray
    shape_on: np.ndarray
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    w: float = 1.0

    def __post_init__(self):
        e = len(self.selection)
        mass = np.asarray(self.mass, dtype=np.float64)
        centroid = np.asarray(self.centroid, dtype=np.float64)
        shape = np.asarray(self.shape, dtype=np.float64)
        if mass.shape[-1:] != (e,) or centroid.shape[-2:] != (e, 3) or shape.shape[-3:] != (e, 3, 3):
            raise ConstraintError(
                f"target shapes {mass.shape}, {centroid.shape}, {shape.shape} do not match {e} groups"
            )
        flags = []
        for name in ("mass_on", "centroid_on", "shape_on"):
            f = np.broadcast_to(np.asarray(getattr(self, name), dtype=bool), (e,)).copy()
            flags.append(f)
        lambdas = tuple(float(x) for x in self.lambdas)
        if len(lambdas) != 3 or any(x < 0 for x in lambdas):
            raise ConstraintError(f"lambdas must be three non-negative numbers, got {self.lambdas}")
        if self.w > 0 and not any(f.any() for f in flags):
            raise ConstraintError("guidance weight is positive but no moment is active")
        if flags[2].any():
            active = shape[..., flags[2], :, :]
            trace = np.trace(active, axis1=-2, axis2=-1)
            if np.any(np.abs(trace - 1) > 1e-6):
                raise ConstraintError("active shape targets must have trace 1")
            if np.any(np.linalg.eigvalsh(0.5 * (active + np.swapaxes(active, -1, -2)))[..., 0] < -1e-9):
                raise ConstraintError("active shape targets must be positive semidefinite")
        for name, value in (("mass", mass), ("centroid", centroid), ("shape", shape)):
            object.__setattr__(self, name, value)
        for name, value in zip(("mass_on", "centroid_on", "shape_on"), flags):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "w", float(self.w))

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mass.shape[:-1]

    @classmethod
    def from_moments(
        cls,
        moments: GeometricMoments,
        selection: ComponentSelection,
        mass_on=True,
        centroid_on=True,
        shape_on=True,
        lambdas=DEFAULT_LAMBDAS,
        w: float = 1.0,
        mass_scale: float = 1.0,
    ) -> "ConstraintSet":
        return cls(
            selection,
            moments.mass * mass_scale,
            moments.centroid,
            moments.normalized_covariance,
            mass_on,
            centroid_on,
            shape_on,
            lambdas,
            w,
        )

    def with_weights(self, lambdas=None, w=None) -> "ConstraintSet":
        return replace(
            self,
            lambdas=self.lambdas if lambdas is None else tuple(lambdas),
            w=self.w if w is None else w,
        )

    def take(self, index) -> "ConstraintSet":
        """Targets for a subset of the batch axis."""
        return replace(self, mass=self.mass[index], centroid=self.centroid[index], shape=self.shape[index])

    def to_dict(self) -> dict:
        if self.batch_shape:
            raise ConstraintError("only unbatched constraint sets serialize to JSON")
        groups = []
        for k, name in enumerate(self.selection.names):
            groups.append({
                "labels": name.split("+"),
                "channels": list(self.selection.groups[k]),
                "mass": {"target": float(self.mass[k]), "on": bool(self.mass_on[k])},
                "centroid": {"target": self.centroid[k].tolist(), "on": bool(self.centroid_on[k])},
                "shape": {"target": self.shape[k].tolist(), "on": bool(self.shape_on[k])},
            })
        return {"groups": groups, "lambdas": list(self.lambdas), "w": self.w}


def stack_constraints(sets: Sequence[ConstraintSet]) -> ConstraintSet:
    """Stack unbatched sets sharing selection, flags and weights along a new batch axis."""
    first = sets[0]
    for s in sets[1:]:
        if (s.selection != first.selection or s.lambdas != first.lambdas or s.w != first.w
                or not all(np.array_equal(getattr(s, f), getattr(first, f))
                           for f in ("mass_on", "centroid_on", "shape_on"))):
            raise ConstraintError("stacked constraint sets must share selection, flags and weights")
    return replace(
        first,
        mass=np.stack([s.mass for s in sets]),
        centroid=np.stack([s.centroid for s in sets]),
        shape=np.stack([s.shape for s in sets]),
    )


@dataclass
class LossBreakdown:
    total: np.ndarray
    size: np.ndarray
    position: np.ndarray
    shape: np.ndarray
    gate: np.ndarray  # (..., E) True where position/shape terms are live
    extras: dict = field(default_factory=dict)


def _counts(cs: ConstraintSet) -> tuple[float, float, float]:
    return (
        max(1.0, float(cs.mass_on.sum())),
        max(1.0, 3.0 * cs.centroid_on.sum()),
        max(1.0, 9.0 * cs.shape_on.sum()),
    )


def geometric_loss(m: GeometricMoments, cs: ConstraintSet, empty_mass: float = EMPTY_MASS) -> LossBreakdown:
    gate = m.mass >= empty_mass
    n_size, n_pos, n_shape = _counts(cs)
    d_mass = (m.mass - cs.mass) * cs.mass_on
    d_pos = (m.centroid - cs.centroid) * (cs.centroid_on & gate)[..., None]
    d_shape = (m.normalized_covariance - cs.shape) * (cs.shape_on & gate)[..., None, None]
    size = (d_mass**2).sum(axis=-1) / n_size
    pos = (d_pos**2).sum(axis=(-2, -1)) / n_pos
    shape = (d_shape**2).sum(axis=(-3, -2, -1)) / n_shape
    l0, l1, l2 = cs.lambdas
    total = l0 * size + l1 * pos + l2 * shape
    return LossBreakdown(total, size, pos, shape, gate)


def geometric_loss_cotangents(m: GeometricMoments, cs: ConstraintSet, empty_mass: float = EMPTY_MASS):
    """Derivatives of ``L_geom`` w.r.t. mass, centroid and normalized covariance."""
    gate = m.mass >= empty_mass
    n_size, n_pos, n_shape = _counts(cs)
    l0, l1, l2 = cs.lambdas
    g_mass = 2 * l0 * (m.mass - cs.mass) * cs.mass_on / n_size
    g_pos = 2 * l1 * (m.centroid - cs.centroid) * (cs.centroid_on & gate)[..., None] / n_pos
    g_shape = 2 * l2 * (m.normalized_covariance - cs.shape) * (cs.shape_on & gate)[..., None, None] / n_shape
    return g_mass, g_pos, g_shape


def loss_gradient_wrt_grid(
    values: np.ndarray,
    cs: ConstraintSet,
    temperature: float = DEFAULT_TEMPERATURE,
    coords: np.ndarray | None = None,
    stabilizer: float = STABILIZER,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss and its gradient w.r.t. the pre-binarization grid ``(..., C, H, W, D)``.

    Chain: soft binarization, component selection, moments (with the
    stabilized mass in denominators), composite loss.
    """
    values = np.asarray(values, dtype=np.float64)
    if coords is None:
        coords = coordinate_field(values.shape[-3:])
    channels = values.shape[-4]
    probs = soft_binarize(values, temperature)
    fields = select_components(probs, cs.selection)
    m = extract_moments(fields, coords, stabilizer=stabilizer)
    breakdown = geometric_loss(m, cs)
    if cs.lambdas == (0.0, 0.0, 0.0):
        return breakdown, np.zeros_like(values)
    g_mass, g_pos, g_shape = geometric_loss_cotangents(m, cs)
    g_fields = moment_gradients(
        fields, coords, mass_cot=g_mass, centroid_cot=g_pos, shape_cot=g_shape, stabilizer=stabilizer
    )
    g_probs = select_components_vjp(g_fields, cs.selection, channels)
    return breakdown, soft_binarize_vjp(probs, g_probs, temperature)


# -- constraint files ------------------------------------------------------------


def _moments_of(grid: LabelGrid, selection: ComponentSelection) -> GeometricMoments:
    fields = select_components(grid.data.astype(np.float64), selection)
    return extract_moments(fields, coordinate_field(grid.shape))


def load_constraints(path: str | Path, labels: Sequence[str] | None = None) -> ConstraintSet:
    """Read a constraint JSON file; see :func:`constraints_from_dict`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConstraintError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ConstraintError(f"{path}: invalid JSON ({exc})") from None
    return constraints_from_dict(doc, labels=labels, base_dir=path.parent)


def constraints_from_dict(doc: dict, labels: Sequence[str] | None = None, base_dir: Path | None = None) -> ConstraintSet:
    """Build a :class:`ConstraintSet` from the JSON form.

    ``{"groups": [{"labels": [...], "mass": {"target", "on"}, "centroid": {...},
    "shape": {...}}], "lambdas": [l0, l1, l2], "w": w, "reference": {"grid":
    path, "multipliers": {"mass": 2.0}}}``.  Missing targets are copied from
    the reference grid's measured moments, scaled by the multipliers.
    """
    if "groups" not in doc or not doc["groups"]:
        raise ConstraintError("constraints: 'groups' must be a nonempty list")
    ref = doc.get("reference")
    ref_grid = None
    multipliers = {}
    if ref is not None:
        ref_path = Path(ref["grid"])
        if base_dir is not None and not ref_path.is_absolute():
            ref_path = base_dir / ref_path
        ref_grid = load_vgf(ref_path)
        multipliers = dict(ref.get("multipliers", {}))
        bad = set(multipliers) - {"mass", "centroid"}
        if bad:
            raise ConstraintError(f"constraints.reference.multipliers: unsupported keys {sorted(bad)}")
        labels = labels or ref_grid.labels
    groups = []
    for i, g in enumerate(doc["groups"]):
        if "channels" in g:
            groups.append(tuple(g["channels"]))
        elif labels is not None:
            try:
                groups.append(tuple(list(labels).index(name) for name in g["labels"]))
            except ValueError:
                raise ConstraintError(f"constraints.groups[{i}].labels: unknown label in {g['labels']}") from None
        else:
            raise ConstraintError(f"constraints.groups[{i}]: label names need a reference grid or label list")
    names = tuple("+".join(g.get("labels", [str(c) for c in grp])) for g, grp in zip(doc["groups"], groups))
    selection = ComponentSelection(tuple(groups), names)
    measured = _moments_of(ref_grid, selection) if ref_grid is not None else None

    e = len(groups)
    mass, centroid, shape = np.zeros(e), np.zeros((e, 3)), np.zeros((e, 3, 3))
    on = {"mass": np.zeros(e, bool), "centroid": np.zeros(e, bool), "shape": np.zeros(e, bool)}
    for k, g in enumerate(doc["groups"]):
        for key, store in (("mass", mass), ("centroid", centroid), ("shape", shape)):
            entry = g.get(key, {})
            on[key][k] = bool(entry.get("on", False))
            if "target" in entry:
                store[k] = np.asarray(entry["target"], dtype=np.float64)
            elif measured is not None:
                source = {"mass": measured.mass, "centroid": measured.centroid,
                          "shape": measured.normalized_covariance}[key]
                store[k] = source[k] * multipliers.get(key, 1.0)
            elif on[key][k]:
                raise ConstraintError(f"constraints.groups[{k}].{key}: active but no target or reference")
    try:
        return ConstraintSet(
            selection, mass, centroid, shape, on["mass"], on["centroid"], on["shape"],
            tuple(doc.get("lambdas", DEFAULT_LAMBDAS)), float(doc.get("w", 1.0)),
        )
    except ConstraintError as exc:
        raise ConstraintError(f"constraints: {exc}") from None


def save_constraints(cs: ConstraintSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cs.to_dict(), indent=2) + "\n")
