"""Command-line entry point: ``geoguide <subcommand> ...``.

Exit codes: 0 success, 1 domain error or failed ``recipe --check``,
2 configuration / usage error.  ``GEOGUIDE_THREADS`` caps torch's intra-op
thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, RunDirectory, load_config
from .diffusion.checkpoint import CheckpointError, load_denoiser, save_checkpoint
from .diffusion.sampler import SamplerConfig, SamplerError, guided_sample, inpaint, sample
from .diffusion.schedule import ScheduleError
from .diffusion.train import TrainingError, train
from .export import save_ellipsoid_mesh, save_label_mesh, write_csv
from .grid import ComponentSelection, GridError, LabelGrid, coordinate_field, load_vgf, save_vgf, select_components
from .loss import ConstraintError, load_constraints
from .metrics.fidelity import conditional_fidelity
from .metrics.morph import Standardizer, frechet_distance, morph_report, morph_vectors, precision_recall
from .metrics.pointcloud import pointcloud_metrics
from .moments import MomentError, ellipsoid_from_moments, extract_moments
from .phantom import PhantomError, generate_one

log = logging.getLogger("geoguide")

DOMAIN_ERRORS = (GridError, MomentError, ConstraintError, PhantomError, SamplerError, TrainingError, CheckpointError)
CONFIG_ERRORS = (ConfigError, ScheduleError, FileNotFoundError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = load_config(getattr(args, "config", None))
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["schedule"] = replace(cfg.schedule, steps=args.steps)
    if getattr(args, "w", None) is not None:
        over["w"] = args.w
    if getattr(args, "solver", None):
        over["sampler"] = replace(over.get("sampler", cfg.sampler), solver=args.solver)
    if getattr(args, "gradient_path", None):
        over["sampler"] = replace(over.get("sampler", cfg.sampler), gradient_path=args.gradient_path)
    if getattr(args, "ckpt", None):
        over["checkpoint"] = str(args.ckpt)
    if getattr(args, "out", None):
        over["out"] = str(args.out)
    return replace(cfg, **over)


def _load_grids(directory: Path) -> tuple[np.ndarray, tuple[str, ...]]:
    paths = sorted(p for p in Path(directory).glob("*.json") if p.name not in ("manifest.json", "config.json", "hashes.json"))
    if not paths:
        raise FileNotFoundError(f"{directory}: no VGF grids found")
    grids = [load_vgf(p) for p in paths]
    return np.stack([g.data for g in grids]), grids[0].labels


def _save_samples(grids: np.ndarray, labels, run: RunDirectory, prefix: str = "sample") -> dict[str, str]:
    hashes = {}
    for i, g in enumerate(grids):
        path = save_vgf(LabelGrid(g, labels), run.file(f"{prefix}_{i:04d}"))
        hashes[path.name] = _sha256(path)
    _write_json(run.file("hashes.json"), hashes)
    return hashes


# -- subcommands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    spec = cfg.phantom if args.seed is None else replace(cfg.phantom, seed=args.seed)
    coords = coordinate_field(spec.shape)
    sel = ComponentSelection(tuple((c,) for c in range(1, len(spec.labels))), spec.labels[1:])
    with RunDirectory(args.out, replace(cfg, phantom=spec)) as run:
        samples = []
        for i in range(args.start, args.start + args.n):
            grid, _ = generate_one(spec, i)
            path = save_vgf(grid, run.file(f"phantom_{i:06d}"))
            m = extract_moments(select_components(grid.data.astype(np.float64), sel), coords)
            samples.append({
                "index": i,
                "file": path.name,
                "sha256": _sha256(path),
                "mass": dict(zip(sel.names, m.mass.tolist())),
                "centroid": dict(zip(sel.names, m.centroid.tolist())),
            })
        _write_json(run.file("manifest.json"), {
            "seed": spec.seed, "spec_hash": spec.digest(), "spec": spec.to_dict(), "samples": samples,
        })
    print(f"wrote {args.n} phantoms to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data, labels = _load_grids(args.data)
    training = cfg.training
    if args.epochs is not None:
        training = replace(training, epochs=args.epochs)
    training = replace(training, arch=replace(training.arch, channels=data.shape[1]))
    result = train(data, training)
    save_checkpoint(result.net, training, args.out_ckpt, {"labels": list(labels), "n_train": len(data),
                                                          "curve": result.curve})
    print(f"saved checkpoint to {args.out_ckpt} (final loss {result.curve[-1]['loss']:.4f})")
    return 0


def _sampler_setup(args, cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ConfigError("--ckpt is required")
    denoiser, scale = load_denoiser(cfg.checkpoint)
    return denoiser, replace(cfg.sampler, logit_scale=scale)


def _labels_for(cfg: ExperimentConfig, channels: int) -> tuple[str, ...]:
    labels = cfg.phantom.labels
    return labels if len(labels) == channels else tuple(["background"] + [f"label{i}" for i in range(1, channels)])


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    denoiser, scfg = _sampler_setup(args, cfg)
    channels = denoiser.arch.channels
    shape = (channels, *cfg.phantom.shape)
    with RunDirectory(cfg.out, cfg, {"command": "sample", "n": args.n}) as run:
        res = sample(denoiser, cfg.schedule, shape, args.n, cfg.seed, scfg)
        _save_samples(res.grids, _labels_for(cfg, channels), run)
    print(f"wrote {args.n} samples to {cfg.out}")
    return 0


def cmd_guide(args) -> int:
    cfg = _resolve(args)
    denoiser, scfg = _sampler_setup(args, cfg)
    channels = denoiser.arch.channels
    labels = _labels_for(cfg, channels)
    cs = load_constraints(args.constraints, labels)
    if args.w is not None:
        cs = cs.with_weights(w=args.w)
    cfg = replace(cfg, constraints=str(args.constraints), w=cs.w)
    with RunDirectory(cfg.out, cfg, {"command": "guide", "n": args.n}) as run:
        res = guided_sample(denoiser, cfg.schedule, cs, (channels, *cfg.phantom.shape), args.n, cfg.seed, scfg)
        _save_samples(res.grids, labels, run)
        _write_json(run.file("guidance_history.json"), res.history)
    print(f"wrote {args.n} guided samples to {cfg.out}")
    return 0


def cmd_inpaint(args) -> int:
    cfg = _resolve(args)
    denoiser, scfg = _sampler_setup(args, cfg)
    known = load_vgf(args.known)
    mask = load_vgf(args.mask)
    # a two-label grid: channel 0 fixed, channel 1 editable
    if mask.channels != 2:
        raise GridError(f"{args.mask}: mask must have exactly two labels (fixed, editable)")
    cs = load_constraints(args.constraints, known.labels) if args.constraints else None
    cfg = replace(cfg, constraints=str(args.constraints) if args.constraints else None)
    with RunDirectory(cfg.out, cfg, {"command": "inpaint", "n": args.n}) as run:
        res = inpaint(denoiser, cfg.schedule, cs, known.data, mask.data[1], args.n, cfg.seed, scfg)
        _save_samples(res.grids, known.labels, run)
    print(f"wrote {args.n} inpainted samples to {cfg.out}")
    return 0


def _selection_arg(spec: str | None, labels: tuple[str, ...]) -> ComponentSelection:
    """Groups as ``"LV,RV+Ao"`` (comma between groups, ``+`` for unions) or a JSON file."""
    if spec is None:
        return ComponentSelection(tuple((c,) for c in range(1, len(labels))), labels[1:])
    if spec.endswith(".json"):
        doc = json.loads(Path(spec).read_text())
        groups = doc["groups"] if isinstance(doc, dict) else doc
    else:
        groups = [g.split("+") for g in spec.split(",")]
    try:
        return ComponentSelection.from_labels(labels, groups)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"--select: {exc}") from None


def cmd_moments(args) -> int:
    grid = load_vgf(args.grid)
    sel = _selection_arg(args.select, grid.labels)
    m = extract_moments(select_components(grid.data.astype(np.float64), sel), coordinate_field(grid.shape))
    out = []
    for k, name in enumerate(sel.names):
        entry = {"group": name, **m.component(k).to_dict()}
        entry["ellipsoid"] = None if m.empty[k] else ellipsoid_from_moments(m, k).to_dict()
        out.append(entry)
    text = json.dumps({"grid": str(args.grid), "components": out}, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    real, labels = _load_grids(args.real)
    synth, _ = _load_grids(args.synth)
    ref = morph_vectors(real)
    z = Standardizer.fit(ref)
    real_z, synth_z = z(ref), z(morph_vectors(synth))
    report: dict = {"n_real": len(real), "n_synth": len(synth), "fd": frechet_distance(real_z, synth_z)}
    if min(len(real), len(synth)) > args.k:
        report["precision"], report["recall"] = precision_recall(real_z, synth_z, args.k)
    if args.constraints:
        cs = load_constraints(args.constraints, labels)
        report["fidelity"] = conditional_fidelity(synth, cs).summary(display=args.display)
    if args.points > 0:
        report["pointcloud"] = pointcloud_metrics(real, synth, labels, n_points=args.points).to_dict()
    with RunDirectory(args.out, None, {"command": "eval", "real": str(args.real), "synth": str(args.synth)}) as run:
        _write_json(run.file("report.json"), report)
        rows = [r.to_dict() | {"set": "real"} for r in morph_report(real, labels)]
        rows += [r.to_dict() | {"set": "synth"} for r in morph_report(synth, labels)]
        write_csv(rows, run.file("morph.csv"))
    print(json.dumps({k: v for k, v in report.items() if k != "pointcloud"}, indent=2))
    return 0


def cmd_recipe(args) -> int:
    from .experiments import run_recipe

    cfg = _resolve(args)
    result = run_recipe(args.name, cfg, cfg.out, use_cache=args.cache, pointcloud=args.pointcloud)
    for r in result.rows:
        print(json.dumps(r, default=float))
    failed = [name for name, ok in result.checks.items() if not ok]
    for name, ok in result.checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if args.check and failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_mesh(args) -> int:
    grid = load_vgf(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coords = coordinate_field(grid.shape)
    for c, name in enumerate(grid.labels):
        if c == 0 or not grid.data[c].any():
            continue
        save_label_mesh(grid.data[c], out / f"{name}.obj", name)
        if args.ellipsoids:
            m = extract_moments(grid.data[c][None].astype(np.float64), coords)
            save_ellipsoid_mesh(ellipsoid_from_moments(m, 0), out / f"{name}_ellipsoid.obj", f"{name}_ellipsoid")
    print(f"wrote meshes to {out}")
    return 0


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geoguide {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required)

    def sampling(sp):
        sp.add_argument("--ckpt", type=Path, required=True)
        sp.add_argument("--n", type=int, default=1)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--solver", choices=("ode", "sde"))

    sp = sub.add_parser("gen-data", help="generate phantom grids and a manifest")
    common(sp)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--start", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the denoiser on a directory of grids")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", dest="out_ckpt", type=Path, required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="unconditional samples")
    common(sp)
    sampling(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("guide", help="geometry-guided samples")
    common(sp)
    sampling(sp)
    sp.add_argument("--constraints", type=Path, required=True)
    sp.add_argument("--w", type=float)
    sp.add_argument("--gradient-path", choices=("full", "clean"))
    sp.set_defaults(func=cmd_guide)

    sp = sub.add_parser("inpaint", help="regenerate a masked region of a known grid")
    common(sp)
    sampling(sp)
    sp.add_argument("--known", type=Path, required=True)
    sp.add_argument("--mask", type=Path, required=True, help="two-label grid (fixed, editable)")
    sp.add_argument("--constraints", type=Path)
    sp.add_argument("--gradient-path", choices=("full", "clean"))
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("moments", help="geometric moments of a grid")
    sp.add_argument("grid", type=Path)
    sp.add_argument("--select", help='groups such as "LV,RV+Ao" or a JSON file; default every label')
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("eval", help="compare two directories of grids")
    sp.add_argument("--real", type=Path, required=True)
    sp.add_argument("--synth", type=Path, required=True)
    sp.add_argument("--constraints", type=Path)
    sp.add_argument("--display", action="store_true", help="apply table display scalings to fidelity")
    sp.add_argument("--points", type=int, default=0, help="points per cloud for MMD/COV/1-NNA (0 skips)")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("recipe", help="named end-to-end experiment")
    sp.add_argument("name", choices=("disentangle", "wsweep", "compose", "inpaint"))
    common(sp)
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--w", type=float)
    sp.add_argument("--check", action="store_true", help="exit 1 if any recipe check fails")
    sp.add_argument("--cache", action="store_true", help="reuse cached sample sets")
    sp.add_argument("--pointcloud", action="store_true", help="add MMD/COV/1-NNA to the ablation table")
    sp.set_defaults(func=cmd_recipe)

    sp = sub.add_parser("mesh", help="OBJ meshes of each label (and fitted ellipsoids)")
    sp.add_argument("grid", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--ellipsoids", action="store_true")
    sp.set_defaults(func=cmd_mesh)
    return p


def _threads() -> None:
    value = os.environ.get("GEOGUIDE_THREADS")
    if value:
        import torch

        try:
            torch.set_num_threads(int(value))
        except ValueError:
            raise ConfigError(f"GEOGUIDE_THREADS must be an integer, got {value!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _threads()
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
