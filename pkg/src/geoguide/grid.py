"""Dense multi-label voxel grids and the elementwise operations shared by every stage.

Arrays follow the ``(..., C, H, W, D)`` layout: any number of leading batch
axes, then channels, then the three spatial axes.  Channel 0 is background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_TEMPERATURE = 1e-2


class GridError(ValueError):
    """Invalid grid, selection or file."""


@dataclass(frozen=True)
class LabelGrid:
    data: np.ndarray  # (C, H, W, D)
    labels: tuple[str, ...] = ()
    voxel_edge: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 4:
            raise GridError(f"LabelGrid expects (C, H, W, D), got shape {data.shape}")
        if data.shape[0] < 2:
            raise GridError("LabelGrid needs at least 2 channels (background + 1 label)")
        labels = tuple(self.labels) or tuple(
            ["background"] + [f"label{c}" for c in range(1, data.shape[0])]
        )
        if len(labels) != data.shape[0]:
            raise GridError(f"{len(labels)} label names for {data.shape[0]} channels")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def is_one_hot(self) -> bool:
        d = self.data
        return bool(np.all((d == 0) | (d == 1)) and np.all(d.sum(axis=0) == 1))

    def label_index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise GridError(f"unknown label {name!r}; have {list(self.labels)}") from None


def axis_ticks(n: int) -> np.ndarray:
    if n < 1:
        raise GridError(f"invalid axis length {n}")
    return np.full(1, 0.5) if n == 1 else np.arange(n) / (n - 1)


def coordinate_field(shape: Sequence[int]) -> np.ndarray:
    """Normalized voxel positions, shape ``(H, W, D, 3)``.

    Axis ``n`` takes the values ``i / (N_n - 1)`` so both endpoints are exactly
    0 and 1.  A length-1 axis maps to 0.5.
    """
    axes = [axis_ticks(n) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def soft_binarize(values: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Channel softmax of ``values / temperature`` (channel axis is -4)."""
    if not temperature > 0:
        raise GridError(f"temperature must be positive, got {temperature}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 4 or values.shape[-4] < 2:
        raise GridError("soft_binarize needs a channel axis with at least 2 channels")
    logits = values / temperature
    logits = logits - logits.max(axis=-4, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-4, keepdims=True)


def soft_binarize_vjp(probs: np.ndarray, cotangent: np.ndarray, temperature: float) -> np.ndarray:
    """Pull a cotangent on the softmax output back to its input.

    ``probs`` is the forward output of :func:`soft_binarize`.
    """
    inner = (probs * cotangent).sum(axis=-4, keepdims=True)
    return probs * (cotangent - inner) / temperature


@dataclass(frozen=True)
class ComponentSelection:
    """Ordered label groups; each group's channels are summed into one field."""

    groups: tuple[tuple[int, ...], ...]
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        for g in groups:
            if not g:
                raise GridError("component groups must be nonempty")
            if any(c <= 0 for c in g):
                raise GridError(f"group {g} references the background channel or a negative index")
            if len(set(g)) != len(g):
                raise GridError(f"group {g} repeats a channel")
        names = tuple(self.names) or tuple("+".join(map(str, g)) for g in groups)
        if len(names) != len(groups):
            raise GridError("one name per group required")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.groups)

    @classmethod
    def from_labels(cls, labels: Sequence[str], groups: Sequence[Sequence[str]]) -> "ComponentSelection":
        index = {name: i for i, name in enumerate(labels)}
        out = []
        for g in groups:
            missing = [name for name in g if name not in index]
            if missing:
                raise GridError(f"unknown labels {missing}; have {list(labels)}")
            out.append(tuple(index[name] for name in g))
        return cls(tuple(out), tuple("+".join(g) for g in groups))

    def validate(self, channels: int) -> None:
        for g in self.groups:
            if max(g) >= channels:
                raise GridError(f"group {g} out of range for {channels} channels")

    def membership(self, channels: int) -> np.ndarray:
        """``(E, C)`` 0/1 matrix with ``[k, c] = 1`` when channel c is in group k."""
        self.validate(channels)
        m = np.zeros((len(self.groups), channels))
        for k, g in enumerate(self.groups):
            m[k, list(g)] = 1.0
        return m


def select_components(values: np.ndarray, sel: ComponentSelection) -> np.ndarray:
    """Sum each group's channels: ``(..., C, H, W, D) -> (..., E, H, W, D)``."""
    values = np.asarray(values)
    member = sel.membership(values.shape[-4])
    return np.einsum("kc,...chwd->...khwd", member, values)


def select_components_vjp(cotangent: np.ndarray, sel: ComponentSelection, channels: int) -> np.ndarray:
    member = sel.membership(channels)
    return np.einsum("kc,...khwd->...chwd", member, cotangent)


def argmax_harden(values: np.ndarray) -> np.ndarray:
    """One-hot of the per-voxel winning channel; ties go to the lowest index."""
    values = np.asarray(values)
    winner = np.argmax(values, axis=-4)
    channels = values.shape[-4]
    onehot = winner[..., None, :, :, :] == np.arange(channels).reshape(channels, 1, 1, 1)
    return onehot.astype(np.uint8)


# -- VGF files ---------------------------------------------------------------
#
# <stem>.json : {"format": "vgf", "version": 1, "channels": C, "shape": [H, W, D],
#                "dtype": "u8" | "f32", "voxel_edge": float, "labels": [...]}
# <stem>.raw  : C*H*W*D little-endian values, index (c, i, j, k) at
#               ((c*H + i)*W + j)*D + k, i.e. C order with k fastest.

_VGF_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


def _vgf_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def save_vgf(grid: LabelGrid, path: str | Path, dtype: str | None = None) -> Path:
    """Write ``<stem>.json`` and ``<stem>.raw``; returns the json path."""
    if dtype is None:
        dtype = "u8" if grid.is_one_hot() else "f32"
    if dtype not in _VGF_DTYPES:
        raise GridError(f"unsupported VGF dtype {dtype!r}")
    meta_path, raw_path = _vgf_paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "vgf",
        "version": 1,
        "channels": grid.channels,
        "shape": list(grid.shape),
        "dtype": dtype,
        "voxel_edge": grid.voxel_edge,
        "labels": list(grid.labels),
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(grid.data, dtype=_VGF_DTYPES[dtype]).tobytes())
    return meta_path


def load_vgf(path: str | Path) -> LabelGrid:
    meta_path, raw_path = _vgf_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
        payload = raw_path.read_bytes()
    except FileNotFoundError as exc:
        raise GridError(f"missing VGF file: {exc.filename}") from None
    dtype = _VGF_DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise GridError(f"{meta_path}: unsupported dtype {meta.get('dtype')!r}")
    shape = (int(meta["channels"]), *map(int, meta["shape"]))
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise GridError(f"{raw_path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    data = data.astype(np.uint8 if dtype.kind == "u" else np.float32)
    return LabelGrid(data, tuple(meta.get("labels", ())), float(meta.get("voxel_edge", 1.0)))
