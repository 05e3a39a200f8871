"""Experiment configuration, run directories and the on-disk cache."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from . import __version__
from .diffusion.network import Architecture
from .diffusion.sampler import SamplerConfig, SamplerError
from .diffusion.schedule import NoiseSchedule, ScheduleError
from .diffusion.train import TrainingConfig
from .loss import DEFAULT_LAMBDAS
from .phantom import PhantomError, PhantomSpec, default_spec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=default_spec)
    n_train: int = 256
    training: TrainingConfig = field(default_factory=TrainingConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    compose_steps: int = 100
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    w: float = 1.0
    w_sweep: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    seed: int = 0
    n_samples: int = 50
    sweep_samples: int = 20
    target_start: int = 100_000
    component: str = "RV"
    compose_sets: tuple[tuple[str, ...], ...] = (("RV",), ("RV", "Ao"), ("RV", "Ao", "Myo"))
    inpaint_component: str = "RV"
    inpaint_scales: tuple[float, ...] = (2.0, 0.5)
    inpaint_samples: int = 10
    inpaint_dilation: int = 4
    eval_points: int = 256
    constraints: str | None = None
    checkpoint: str | None = None
    out: str = "runs"

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            d[f.name] = _jsonable(v)
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "config") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"{where}: expected an object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"{where}.{unknown[0]}: unknown key")
        kw: dict[str, Any] = {}
        for name, value in d.items():
            path = f"{where}.{name}"
            try:
                kw[name] = _PARSERS.get(name, _scalar(known[name]))(value, path)
            except ConfigError:
                raise
            except (TypeError, ValueError, KeyError, PhantomError, ScheduleError, SamplerError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def __post_init__(self):
        checks = [
            ("n_train", self.n_train >= 1, "must be >= 1"),
            ("n_samples", self.n_samples >= 1, "must be >= 1"),
            ("compose_steps", self.compose_steps >= 2, "must be >= 2"),
            ("lambdas", len(self.lambdas) == 3 and min(self.lambdas) >= 0, "must be three non-negative numbers"),
            ("inpaint_dilation", self.inpaint_dilation >= 0, "must be >= 0"),
            ("eval_points", self.eval_points >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"config.{name}: {msg}")
        labels = self.phantom.labels[1:]
        for name in (self.component, self.inpaint_component, *(n for s in self.compose_sets for n in s)):
            if name not in labels:
                raise ConfigError(f"config: label {name!r} is not one of {labels}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_key(self) -> str:
        """Identifies the trained model: phantom family, training set size and training config."""
        blob = json.dumps([self.phantom.digest(), self.n_train, self.training.digest()]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _scalar(f):
    def parse(value, path):
        if f.type in ("int", int) and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"{path}: expected an integer")
        if f.type in ("float", float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        if f.type in ("str", str) and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        if f.type == "str | None" and value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string or null")
        return float(value) if f.type in ("float", float) else value
    return parse


def _numbers(value, path):
    if not isinstance(value, (list, tuple)) or not all(isinstance(x, (int, float)) for x in value):
        raise ConfigError(f"{path}: expected a list of numbers")
    return tuple(float(x) for x in value)


def _sets(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of label lists")
    out = []
    for i, s in enumerate(value):
        if not isinstance(s, (list, tuple)) or not s or not all(isinstance(x, str) for x in s):
            raise ConfigError(f"{path}[{i}]: expected a nonempty list of label names")
        out.append(tuple(s))
    return tuple(out)


def _nested(cls):
    def parse(value, path):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{path}.{unknown[0]}: unknown key")
        defaults = cls()
        for key, v in value.items():
            ref = getattr(defaults, key)
            if isinstance(ref, bool) and not isinstance(v, bool):
                raise ConfigError(f"{path}.{key}: expected a boolean")
            if isinstance(ref, (int, float)) and not isinstance(ref, bool) and (
                isinstance(v, bool) or not isinstance(v, (int, float))
            ):
                raise ConfigError(f"{path}.{key}: expected a number")
            if isinstance(ref, str) and not isinstance(v, str):
                raise ConfigError(f"{path}.{key}: expected a string")
        return cls.from_dict(value) if hasattr(cls, "from_dict") else cls(**value)
    return parse


def _phantom(value, path):
    """Keys given override the default phantom family; ``components`` replaces it wholesale."""
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")
    base = default_spec().to_dict()
    base.update(value)
    return _nested(PhantomSpec)(base, path)


def _training(value, path):
    if isinstance(value, dict) and "arch" in value:
        _nested(Architecture)(value["arch"], f"{path}.arch")
    return _nested(TrainingConfig)(value, path)


_PARSERS = {
    "phantom": _phantom,
    "training": _training,
    "schedule": _nested(NoiseSchedule),
    "sampler": _nested(SamplerConfig),
    "lambdas": _numbers,
    "w_sweep": _numbers,
    "inpaint_scales": _numbers,
    "compose_sets": _sets,
}


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    # resolved configs written by a run carry a version stamp alongside the config
    if isinstance(doc, dict) and "config" in doc and "tool_version" in doc:
        doc = doc["config"]
    return ExperimentConfig.from_dict(doc)


def cache_dir() -> Path:
    root = os.environ.get("GEOGUIDE_CACHE")
    path = Path(root) if root else Path.home() / ".cache" / "geoguide"
    path.mkdir(parents=True, exist_ok=True)
    return path


class RunDirectory:
    """Output directory owned by one process for the duration of a run.

    Entering writes ``config.json`` (the resolved configuration plus the tool
    version) and takes ``.lock``; a second concurrent run on the same
    directory fails instead of interleaving outputs.
    """

    def __init__(self, path: str | Path, config: ExperimentConfig | None = None, extra: dict | None = None):
        self.path = Path(path)
        self.config = config
        self.extra = extra or {}
        self._lock = self.path / ".lock"

    def __enter__(self) -> "RunDirectory":
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path}: run directory is locked by another process ({self._lock})") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        doc = {"tool": "geoguide", "tool_version": __version__, **self.extra}
        if self.config is not None:
            doc["config"] = self.config.to_dict()
        (self.path / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return self

    def __exit__(self, *exc) -> None:
        self._lock.unlink(missing_ok=True)

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
