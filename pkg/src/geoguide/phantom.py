"""Procedural multi-label phantoms built from ellipsoids, shells, crescents and tubes.

All geometry lives in normalized coordinates (see :func:`geoguide.grid.coordinate_field`).
Sample ``i`` of a spec draws from ``numpy.random.default_rng([seed, i])`` (PCG64
seeded through ``SeedSequence``), so samples can be generated in any order or in
parallel and still come out bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from .grid import LabelGrid, axis_ticks, coordinate_field

Range = tuple[float, float]


class PhantomError(ValueError):
    pass


def rotation_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        return np.eye(3)
    x, y, z = axis / norm
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3) or not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9, rtol=0):
        raise PhantomError("rotation must be a 3x3 orthonormal matrix")
    return rotation


def ellipsoid_quadratic(coords: np.ndarray, center, semi_axes, rotation) -> np.ndarray:
    """``(p - c)^T R diag(a^-2) R^T (p - c)`` at every voxel position."""
    semi_axes = np.asarray(semi_axes, dtype=np.float64)
    if np.any(semi_axes <= 0):
        raise PhantomError("semi-axes must be positive")
    rotation = _check_rotation(rotation)
    local = (coords - np.asarray(center, dtype=np.float64)) @ rotation
    return ((local / semi_axes) ** 2).sum(axis=-1)


def rasterize_ellipsoid(center, semi_axes, rotation, shape: Sequence[int]) -> np.ndarray:
    """Boolean occupancy of a solid ellipsoid sampled at voxel centers.

    ``rotation`` columns are the ellipsoid's axes in grid coordinates.
    """
    return ellipsoid_quadratic(coordinate_field(shape), center, semi_axes, rotation) <= 1.0


def ellipsoid_extent(semi_axes, rotation) -> np.ndarray:
    """Half-width of the axis-aligned bounding box."""
    r = np.asarray(rotation)
    return np.sqrt(((r * np.asarray(semi_axes)) ** 2).sum(axis=1))


def bezier(p0, p1, p2, n: int = 96) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * np.asarray(p0) + 2 * (1 - t) * t * np.asarray(p1) + t**2 * np.asarray(p2)


def rasterize_tube(control_points, radius: float, shape: Sequence[int]) -> np.ndarray:
    coords = coordinate_field(shape)
    curve = bezier(*control_points)
    out = np.zeros(tuple(shape), dtype=bool)
    # only voxels inside the curve's padded bounding box can be hit
    lo = curve.min(axis=0) - radius
    hi = curve.max(axis=0) + radius
    box = []
    for axis, n in enumerate(shape):
        ticks = axis_ticks(n)
        idx = np.nonzero((ticks >= lo[axis]) & (ticks <= hi[axis]))[0]
        if idx.size == 0:
            return out
        box.append(slice(idx[0], idx[-1] + 1))
    sub = coords[tuple(box)].reshape(-1, 3)
    d2 = ((sub[:, None, :] - curve[None, :, :]) ** 2).sum(axis=-1).min(axis=1)
    out[tuple(box)] = (d2 <= radius**2).reshape(out[tuple(box)].shape)
    return out


# -- primitive descriptors -----------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid; its long axis starts along z and is tilted by up to ``max_tilt`` radians."""

    name: str
    center: tuple[Range, Range, Range]
    semi_axes: tuple[Range, Range, Range]
    max_tilt: float = 0.0
    kind: str = "ellipsoid"


@dataclass(frozen=True)
class Shell:
    """Shell of random thickness wrapped around an earlier ellipsoid."""

    name: str
    around: str
    thickness: Range
    kind: str = "shell"


@dataclass(frozen=True)
class Crescent:
    """Ellipsoid offset from ``around`` with the dilated outer envelope of ``around`` removed."""

    name: str
    around: str
    offset: tuple[Range, Range, Range]
    semi_axes: tuple[Range, Range, Range]
    max_tilt: float = 0.0
    clearance: float = 0.0
    kind: str = "crescent"


@dataclass(frozen=True)
class Tube:
    """Tube of constant radius along a quadratic Bezier curve anchored on ``around``."""

    name: str
    around: str
    start: tuple[Range, Range, Range]
    bend: tuple[Range, Range, Range]
    end: tuple[Range, Range, Range]
    radius: Range
    kind: str = "tube"


Primitive = Union[Ellipsoid, Shell, Crescent, Tube]
_KINDS = {"ellipsoid": Ellipsoid, "shell": Shell, "crescent": Crescent, "tube": Tube}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (32, 32, 32)
    components: tuple[Primitive, ...] = ()
    margin: float = 0.05
    max_retries: int = 100
    voxel_edge: float = 1.0

    @property
    def labels(self) -> tuple[str, ...]:
        return ("background", *(c.name for c in self.components))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        comps = []
        for c in d.pop("components", ()):
            c = dict(c)
            kind = c.get("kind")
            if kind not in _KINDS:
                raise PhantomError(f"unknown primitive kind {kind!r}")
            comps.append(_KINDS[kind](**_tuplify(c)))
        d["shape"] = tuple(d.get("shape", (32, 32, 32)))
        return cls(components=tuple(comps), **d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _tuplify(x):
    if isinstance(x, dict):
        return {k: _tuplify(v) for k, v in x.items()}
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def default_spec(seed: int = 0, shape: Sequence[int] = (32, 32, 32)) -> PhantomSpec:
    """Background + LV ellipsoid, Myo shell, RV crescent and Ao tube (in z-order)."""
    return PhantomSpec(
        seed=seed,
        shape=tuple(shape),
        components=(
            Ellipsoid(
                "LV",
                center=((0.38, 0.52), (0.50, 0.62), (0.42, 0.58)),
                semi_axes=((0.08, 0.12), (0.08, 0.12), (0.13, 0.20)),
                max_tilt=0.7,
            ),
            Shell("Myo", around="LV", thickness=(0.045, 0.075)),
            Crescent(
                "RV",
                around="Myo",
                offset=((-0.06, 0.06), (-0.22, -0.15), (-0.06, 0.06)),
                semi_axes=((0.09, 0.14), (0.08, 0.12), (0.12, 0.19)),
                max_tilt=0.4,
                clearance=0.02,
            ),
            Tube(
                "Ao",
                around="LV",
                start=((0.10, 0.16), (0.02, 0.08), (-0.05, 0.05)),
                bend=((0.10, 0.18), (0.0, 0.08), (-0.10, 0.10)),
                end=((-0.04, 0.06), (0.06, 0.14), (-0.10, 0.10)),
                radius=(0.04, 0.055),
            ),
        ),
    )


# -- sampling ------------------------------------------------------------------


def _uniform(rng: np.random.Generator, ranges) -> np.ndarray:
    lo = np.array([r[0] for r in ranges], dtype=np.float64)
    hi = np.array([r[1] for r in ranges], dtype=np.float64)
    return lo + (hi - lo) * rng.random(len(lo))


def _random_tilt(rng: np.random.Generator, max_tilt: float) -> np.ndarray:
    if max_tilt <= 0:
        return np.eye(3)
    axis = rng.normal(size=3)
    return rotation_matrix(axis, max_tilt * rng.random())


def _inside(lo: np.ndarray, hi: np.ndarray, margin: float) -> bool:
    return bool(np.all(lo >= margin) and np.all(hi <= 1 - margin))


def _sample_params(spec: PhantomSpec, rng: np.random.Generator) -> dict[str, dict] | None:
    params: dict[str, dict] = {}
    for prim in spec.components:
        if isinstance(prim, Ellipsoid):
            c = _uniform(rng, prim.center)
            a = _uniform(rng, prim.semi_axes)
            r = _random_tilt(rng, prim.max_tilt)
            ext = ellipsoid_extent(a, r)
            p = {"center": c, "semi_axes": a, "rotation": r}
            lo, hi = c - ext, c + ext
        elif isinstance(prim, Shell):
            base = params[prim.around]
            t = rng.uniform(*prim.thickness)
            outer = base["semi_axes"] + t
            ext = ellipsoid_extent(outer, base["rotation"])
            p = {"center": base["center"], "inner": base["semi_axes"], "semi_axes": outer,
                 "rotation": base["rotation"]}
            lo, hi = base["center"] - ext, base["center"] + ext
        elif isinstance(prim, Crescent):
            base = params[prim.around]
            c = base["center"] + _uniform(rng, prim.offset)
            a = _uniform(rng, prim.semi_axes)
            r = _random_tilt(rng, prim.max_tilt)
            ext = ellipsoid_extent(a, r)
            p = {"center": c, "semi_axes": a, "rotation": r,
                 "hole_center": base["center"],
                 "hole_axes": base["semi_axes"] + prim.clearance,
                 "hole_rotation": base["rotation"]}
            lo, hi = c - ext, c + ext
        elif isinstance(prim, Tube):
            base = params[prim.around]
            p0 = base["center"] + _uniform(rng, prim.start)
            p1 = p0 + _uniform(rng, prim.bend)
            p2 = p1 + _uniform(rng, prim.end)
            radius = rng.uniform(*prim.radius)
            pts = np.stack([p0, p1, p2])
            p = {"control_points": pts, "radius": radius}
            lo, hi = pts.min(axis=0) - radius, pts.max(axis=0) + radius
        else:  # pragma: no cover
            raise PhantomError(f"unsupported primitive {prim!r}")
        if not _inside(lo, hi, spec.margin):
            return None
        params[prim.name] = p
    return params


def _rasterize(prim: Primitive, p: dict, coords: np.ndarray, shape) -> np.ndarray:
    if isinstance(prim, Ellipsoid):
        return ellipsoid_quadratic(coords, p["center"], p["semi_axes"], p["rotation"]) <= 1.0
    if isinstance(prim, Shell):
        outer = ellipsoid_quadratic(coords, p["center"], p["semi_axes"], p["rotation"]) <= 1.0
        inner = ellipsoid_quadratic(coords, p["center"], p["inner"], p["rotation"]) <= 1.0
        return outer & ~inner
    if isinstance(prim, Crescent):
        body = ellipsoid_quadratic(coords, p["center"], p["semi_axes"], p["rotation"]) <= 1.0
        hole = ellipsoid_quadratic(coords, p["hole_center"], p["hole_axes"], p["hole_rotation"]) <= 1.0
        return body & ~hole
    if isinstance(prim, Tube):
        return rasterize_tube(p["control_points"], p["radius"], shape)
    raise PhantomError(f"unsupported primitive {prim!r}")  # pragma: no cover


def generate_one(spec: PhantomSpec, index: int) -> tuple[LabelGrid, dict]:
    """Sample ``index`` of ``spec`` and the primitive parameters used to draw it."""
    if not spec.components:
        raise PhantomError("phantom spec has no components")
    rng = np.random.default_rng([spec.seed, index])
    coords = coordinate_field(spec.shape)
    for _ in range(spec.max_retries):
        params = _sample_params(spec, rng)
        if params is None:
            continue
        labels = np.zeros(spec.shape, dtype=np.int64)
        for c, prim in enumerate(spec.components, start=1):
            labels[_rasterize(prim, params[prim.name], coords, spec.shape)] = c
        counts = np.bincount(labels.ravel(), minlength=len(spec.components) + 1)
        if np.all(counts[1:] > 0):
            onehot = (labels[None] == np.arange(len(spec.components) + 1)[:, None, None, None])
            grid = LabelGrid(onehot.astype(np.uint8), spec.labels, spec.voxel_edge)
            return grid, params
    raise PhantomError(
        f"sample {index}: no valid draw within {spec.max_retries} retries "
        f"(primitives escape the {spec.margin} margin or vanish)"
    )


def generate(spec: PhantomSpec, n: int, start: int = 0) -> list[LabelGrid]:
    if n < 1:
        raise PhantomError("n must be >= 1")
    return [generate_one(spec, i)[0] for i in range(start, start + n)]


def generate_array(spec: PhantomSpec, n: int, start: int = 0) -> np.ndarray:
    """Stacked one-hot arrays ``(n, C, H, W, D)`` as uint8."""
    return np.stack([g.data for g in generate(spec, n, start)])
