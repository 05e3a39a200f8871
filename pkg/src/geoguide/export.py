"""File exports: OBJ meshes of labels and fitted ellipsoids, CSV tables, static SVG plots."""

from __future__ import annotations

import csv
from html import escape
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from skimage.measure import marching_cubes

from .moments import Ellipsoid


def _write_obj(path: Path, verts: np.ndarray, faces: np.ndarray, name: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(f"o {name}\n")
        for v in verts:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in faces + 1:
            f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
    return path


def label_mesh(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed 0.5-isosurface of a binary mask, vertices in normalized coordinates."""
    mask = np.asarray(mask, dtype=np.float32)
    if not mask.any():
        raise ValueError("cannot mesh an empty mask")
    padded = np.pad(mask, 1)
    verts, faces, _, _ = marching_cubes(padded, level=0.5)
    scale = np.array([max(n - 1, 1) for n in mask.shape], dtype=np.float64)
    return (verts - 1.0) / scale, faces


def save_label_mesh(mask: np.ndarray, path: str | Path, name: str = "label") -> Path:
    verts, faces = label_mesh(mask)
    return _write_obj(Path(path), verts, faces, name)


def ellipsoid_mesh(e: Ellipsoid, n_lat: int = 16, n_lon: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Triangulated surface of a fitted ellipsoid (UV sphere mapped through the axes)."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
    unit = np.vstack([[0, 0, 1], ring, [0, 0, -1]])
    verts = e.center + (unit * e.semi_axes) @ e.rotation.T
    faces = []
    last = len(unit) - 1
    for j in range(n_lon):
        k = (j + 1) % n_lon
        faces.append([0, 1 + j, 1 + k])
        faces.append([last, last - n_lon + k, last - n_lon + j])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            k = (j + 1) % n_lon
            a, b = 1 + i * n_lon + j, 1 + i * n_lon + k
            c, d = a + n_lon, b + n_lon
            faces += [[a, c, b], [b, c, d]]
    return verts, np.asarray(faces)


def save_ellipsoid_mesh(e: Ellipsoid, path: str | Path, name: str = "ellipsoid") -> Path:
    verts, faces = ellipsoid_mesh(e)
    return _write_obj(Path(path), verts, faces, name)


def write_csv(rows: Iterable[Mapping], path: str | Path) -> Path:
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _bounds(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    if len(v) == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    return lo - pad, hi + pad


def plot_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    lines: bool = False,
    size: tuple[int, int] = (480, 360),
) -> Path:
    """Scatter (or polyline) plot of named ``(x, y)`` series as a standalone SVG."""
    w, h = size
    left, right, top, bottom = 60, 110, 30, 45
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    x0, x1 = _bounds(xs)
    y0, y1 = _bounds(ys)

    def px(x):
        return left + (x - x0) / (x1 - x0) * (w - left - right)

    def py(y):
        return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{h - bottom}" x2="{w - right}" y2="{h - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{h - bottom}" stroke="black"/>',
        f'<text x="{(left + w - right) / 2}" y="{h - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{(top + h - bottom) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(top + h - bottom) / 2})">{escape(ylabel)}</text>',
    ]
    for t in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(t):.1f}" y="{h - bottom + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in np.linspace(y0, y1, 5):
        out.append(f'<text x="{left - 4}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for n, (name, (sx, sy)) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        pts = [(px(a), py(b)) for a, b in zip(sx, sy) if np.isfinite(a) and np.isfinite(b)]
        if lines and len(pts) > 1:
            coords = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}" fill-opacity="0.7"/>' for a, b in pts]
        ly = top + 14 * n + 6
        out.append(f'<circle cx="{w - right + 12}" cy="{ly}" r="4" fill="{color}"/>')
        out.append(f'<text x="{w - right + 20}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
