"""End-to-end experiments: model preparation, sampling runs and the named recipes.

Every recipe writes into a :class:`RunDirectory`: the resolved config, a JSON
report, CSV tables, SVG plots and ``hashes.json`` with SHA-256 digests of the
sampled grids and the report, so a re-run from the same config can be
compared hash for hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import ExperimentConfig, RunDirectory, cache_dir
from .diffusion.checkpoint import load_denoiser, save_checkpoint
from .diffusion.network import Denoiser
from .diffusion.sampler import SamplerConfig, guided_sample, inpaint, sample
from .diffusion.schedule import NoiseSchedule
from .diffusion.train import train, validation_loss
from .export import plot_svg, write_csv
from .grid import ComponentSelection, coordinate_field, select_components
from .loss import ConstraintSet
from .metrics.fidelity import FAMILIES, conditional_fidelity
from .metrics.morph import Standardizer, frechet_distance, morph_report, morph_vectors, precision_recall
from .metrics.pointcloud import SinkhornConfig, pointcloud_metrics
from .moments import extract_moments
from .phantom import generate_array

log = logging.getLogger(__name__)

RECIPES = ("disentangle", "wsweep", "compose", "inpaint")
ABLATION_ROWS = ("Uncond.", "L_size", "L_pos", "L_shape", "L_geom")
_ROW_MASKS = {
    "Uncond.": (0, 0, 0),
    "L_size": (1, 0, 0),
    "L_pos": (0, 1, 0),
    "L_shape": (0, 0, 1),
    "L_geom": (1, 1, 1),
}
MORPH_QUANTITIES = ("mass", "centroid_x", "polar_angle", "elongation")


def array_digest(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256(str((a.dtype.str, a.shape)).encode())
    h.update(a.tobytes())
    return h.hexdigest()


# -- model -----------------------------------------------------------------------------


def training_set(cfg: ExperimentConfig) -> np.ndarray:
    return generate_array(cfg.phantom, cfg.n_train)


def ensure_checkpoint(cfg: ExperimentConfig, cache: Path | None = None) -> Path:
    """Path of the model checkpoint, training (and caching) it when missing."""
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        return path
    path = (cache or cache_dir()) / f"model-{cfg.model_key()}.ggck"
    if path.exists():
        return path
    log.info("training model %s (%d phantoms, %d epochs)", cfg.model_key(), cfg.n_train, cfg.training.epochs)
    data = training_set(cfg)
    result = train(data, cfg.training)
    val = generate_array(cfg.phantom, 32, start=cfg.target_start + 50_000)
    extra = {
        "phantom_digest": cfg.phantom.digest(),
        "n_train": cfg.n_train,
        "curve": result.curve,
        "validation_loss_sigma1": validation_loss(result.net, val, logit_scale=cfg.training.logit_scale),
    }
    tmp = path.with_suffix(".tmp")
    save_checkpoint(result.net, cfg.training, tmp, extra)
    tmp.replace(path)
    return path


@dataclass
class Context:
    cfg: ExperimentConfig
    denoiser: Denoiser
    logit_scale: float
    cache: Path | None = None  # sample cache; None disables it

    @classmethod
    def build(cls, cfg: ExperimentConfig, use_cache: bool = False) -> "Context":
        denoiser, scale = load_denoiser(ensure_checkpoint(cfg))
        return cls(cfg, denoiser, scale, cache_dir() / "samples" if use_cache else None)

    def sampler(self, **kw) -> SamplerConfig:
        return replace(self.cfg.sampler, logit_scale=self.logit_scale, **kw)


def target_grids(cfg: ExperimentConfig, n: int) -> np.ndarray:
    """Held-out phantoms whose moments serve as per-sample targets."""
    return generate_array(cfg.phantom, n, start=cfg.target_start)


def selection_for(cfg: ExperimentConfig, names) -> ComponentSelection:
    return ComponentSelection.from_labels(cfg.phantom.labels, [[n] for n in names])


def constraints_from_grids(grids, sel, lambdas, w, mass_scale=1.0) -> ConstraintSet:
    fields = select_components(np.asarray(grids, dtype=np.float64), sel)
    m = extract_moments(fields, coordinate_field(np.shape(grids)[2:]))
    if m.empty.any():
        raise ValueError("a target component is empty")
    return ConstraintSet.from_moments(m, sel, lambdas=lambdas, w=w, mass_scale=mass_scale)


def _cache_key(ctx: Context, parts: dict) -> str:
    blob = json.dumps({"model": ctx.cfg.model_key(), **parts}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _cached(ctx: Context, parts: dict, run) -> np.ndarray:
    if ctx.cache is None:
        return run()
    path = ctx.cache / f"{_cache_key(ctx, parts)}.npy"
    if path.exists():
        return np.load(path)
    grids = run()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npy")
    np.save(tmp, grids)
    tmp.replace(path)
    return grids


def run_samples(ctx: Context, n: int, steps: int | None = None, cs: ConstraintSet | None = None,
                seed: int | None = None, **sampler_kw) -> np.ndarray:
    """Hardened samples, guided when ``cs`` is given (``cs.w`` is the guidance weight)."""
    cfg = ctx.cfg
    sched = replace(cfg.schedule, steps=steps or cfg.schedule.steps)
    scfg = ctx.sampler(**sampler_kw)
    seed = cfg.seed if seed is None else seed
    shape = (len(cfg.phantom.labels), *cfg.phantom.shape)
    parts = {"n": n, "schedule": sched.__dict__, "sampler": scfg.__dict__, "seed": seed,
             "constraints": None if cs is None else _cs_fingerprint(cs)}

    def go():
        t = time.time()
        if cs is None:
            out = sample(ctx.denoiser, sched, shape, n, seed, scfg).grids
        else:
            out = guided_sample(ctx.denoiser, sched, cs, shape, n, seed, scfg).grids
        log.info("sampled %d grids in %.1fs", n, time.time() - t)
        return out

    return _cached(ctx, parts, go)


def _cs_fingerprint(cs: ConstraintSet) -> dict:
    return {
        "groups": [list(g) for g in cs.selection.groups],
        "targets": array_digest(np.concatenate([cs.mass.ravel(), cs.centroid.ravel(), cs.shape.ravel()])),
        "on": [cs.mass_on.tolist(), cs.centroid_on.tolist(), cs.shape_on.tolist()],
        "lambdas": list(cs.lambdas),
        "w": cs.w,
    }


# -- recipes ---------------------------------------------------------------------------


@dataclass
class RecipeResult:
    name: str
    rows: list[dict]
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    hashes: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"recipe": self.name, "rows": self.rows, "checks": self.checks, "details": self.details}


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    return x


def _fidelity_row(grids, cs) -> dict:
    rep = conditional_fidelity(grids, cs)
    row = {}
    for f in FAMILIES:
        row[f"{f}_median"] = rep.median(f)
        row[f"{f}_mean"] = rep.mean(f)
        row[f"{f}_median_display"] = rep.median(f, display=True)
    row["excluded_empty"] = rep.excluded["position"]
    return row


def _distribution_row(real, synth, pointcloud: bool, n_points: int) -> dict:
    ref = morph_vectors(real)
    z = Standardizer.fit(ref)
    real_z, synth_z = z(ref), z(morph_vectors(synth))
    row = {"fd": frechet_distance(real_z, synth_z)}
    if min(len(real), len(synth)) > 5:
        row["precision"], row["recall"] = precision_recall(real_z, synth_z)
    if pointcloud:
        pc = pointcloud_metrics(real, synth, n_points=n_points, cfg=SinkhornConfig())
        row.update({"mmd": pc.mmd, "cov": pc.cov, "1-nna": pc.nna})
    return row


def disentangle(ctx: Context, pointcloud: bool = False) -> RecipeResult:
    """Ablation table: unconditional, each single moment loss, and the full loss."""
    cfg = ctx.cfg
    n = cfg.n_samples
    real = target_grids(cfg, n)
    sel = selection_for(cfg, [cfg.component])
    rows, hashes = [], {}
    for name in ABLATION_ROWS:
        lambdas = tuple(l * m for l, m in zip(cfg.lambdas, _ROW_MASKS[name]))
        cs = constraints_from_grids(real, sel, lambdas, cfg.w)
        grids = run_samples(ctx, n, cs=cs)
        hashes[f"grids/{name}"] = array_digest(grids)
        row = {"loss": name, "lambdas": list(lambdas)}
        row.update(_fidelity_row(grids, cs))
        row.update(_distribution_row(real, grids, pointcloud, cfg.eval_points))
        rows.append(row)
    by = {r["loss"]: r for r in rows}
    u = by["Uncond."]
    checks = {}
    for row, fam, factor in (("L_size", "size", 5), ("L_pos", "position", 5), ("L_shape", "shape", 2)):
        r = by[row]
        checks[f"{row} improves {fam} >= {factor}x"] = r[f"{fam}_median"] * factor <= u[f"{fam}_median"]
        for other in FAMILIES:
            if other != fam:
                rel = abs(r[f"{other}_median"] - u[f"{other}_median"]) / u[f"{other}_median"]
                checks[f"{row} leaves {other} within 25%"] = bool(rel < 0.25)
    return RecipeResult("disentangle", rows, checks, {"component": cfg.component, "n": n}, hashes)


def wsweep(ctx: Context) -> RecipeResult:
    """Median fidelity of full-loss guidance as the guidance weight grows."""
    cfg = ctx.cfg
    n = cfg.sweep_samples
    real = target_grids(cfg, n)
    sel = selection_for(cfg, [cfg.component])
    rows, hashes = [], {}
    for w in cfg.w_sweep:
        cs = constraints_from_grids(real, sel, cfg.lambdas, w)
        grids = run_samples(ctx, n, cs=cs)
        hashes[f"grids/w={w:g}"] = array_digest(grids)
        rows.append({"w": w, **_fidelity_row(grids, cs)})
    checks = {}
    for fam in FAMILIES:
        med = [r[f"{fam}_median"] for r in rows]
        checks[f"{fam} median non-increasing in w"] = bool(all(b <= a for a, b in zip(med, med[1:])))
    return RecipeResult("wsweep", rows, checks, {"component": cfg.component, "n": n}, hashes)


def _morph_table(grids, labels) -> dict[str, dict[str, np.ndarray]]:
    rows = morph_report(grids, labels)
    table: dict[str, dict[str, list]] = {}
    for r in rows:
        per = table.setdefault(r.label, {q: [] for q in MORPH_QUANTITIES})
        for q in MORPH_QUANTITIES:
            # the capped elongation is a sentinel, not a measurement
            per[q].append(np.nan if q == "elongation" and r.elongation_capped else getattr(r, q))
    return {lab: {q: np.asarray(v, dtype=np.float64) for q, v in per.items()} for lab, per in table.items()}


def compose(ctx: Context) -> RecipeResult:
    """Constrain growing sets of components at once (all three moments each)."""
    cfg = ctx.cfg
    n = cfg.n_samples
    steps = cfg.compose_steps
    labels = cfg.phantom.labels
    real = target_grids(cfg, n)
    singles = sorted({c for s in cfg.compose_sets for c in s}, key=labels.index)
    runs: list[tuple[str, tuple[str, ...]]] = [("none", ())]
    runs += [(c, (c,)) for c in singles]
    runs += [("+".join(s), s) for s in cfg.compose_sets if len(s) > 1]
    all_sel = selection_for(cfg, labels[1:])
    all_targets = constraints_from_grids(real, all_sel, cfg.lambdas, 0.0)
    rows, hashes, results = [], {}, {}
    for key, comps in runs:
        if comps:
            sel = selection_for(cfg, comps)
            cs = constraints_from_grids(real, sel, cfg.lambdas, cfg.w)
            grids = run_samples(ctx, n, steps=steps, cs=cs)
        else:
            grids = run_samples(ctx, n, steps=steps)
        hashes[f"grids/{key}"] = array_digest(grids)
        # size fidelity of every component, constrained or not
        m = extract_moments(select_components(grids.astype(np.float64), all_sel), coordinate_field(grids.shape[2:]))
        size = np.abs(m.mass - all_targets.mass)
        morph = _morph_table(grids, labels)
        results[key] = (comps, size, morph)
        row = {"run": key, "constrained": list(comps), "n_constrained": len(comps)}
        for k, lab in enumerate(labels[1:]):
            row[f"size_median_{lab}"] = float(np.median(size[:, k]))
        rows.append(row)
    checks = {}
    base_morph = results["none"][2]
    for key, (comps, size, morph) in results.items():
        if len(comps) > 1:
            for c in comps:
                k = labels.index(c) - 1
                single = float(np.median(results[c][1][:, k]))
                multi = float(np.median(size[:, k]))
                checks[f"{key}: {c} size fidelity within 2x of single"] = bool(multi <= 2 * single)
        if comps:
            for lab in labels[1:]:
                if lab in comps:
                    continue
                for q in MORPH_QUANTITIES:
                    ratio = _variance_ratio(morph[lab][q], base_morph[lab][q])
                    checks[f"{key}: {lab} {q} variance within 50%"] = bool(abs(ratio - 1) <= 0.5)
    details = {"n": n, "steps": steps, "variance_ratios": {
        key: {lab: {q: _variance_ratio(morph[lab][q], base_morph[lab][q]) for q in MORPH_QUANTITIES}
              for lab in labels[1:] if lab not in comps}
        for key, (comps, _, morph) in results.items() if comps}}
    return RecipeResult("compose", rows, checks, details, hashes)


def _variance_ratio(a: np.ndarray, b: np.ndarray) -> float | None:
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if len(a) < 2 or len(b) < 2 or np.var(b, ddof=1) == 0:
        return None
    return float(np.var(a, ddof=1) / np.var(b, ddof=1))


def editable_mask(known: np.ndarray, channel: int, dilation: int) -> np.ndarray:
    """Dilated component region, excluding voxels of every other foreground label."""
    region = ndimage.binary_dilation(known[channel] > 0, iterations=dilation) if dilation else known[channel] > 0
    keep = (known[1:].sum(axis=0) > 0) & ~(known[channel] > 0)
    return region & ~keep


def inpaint_recipe(ctx: Context) -> RecipeResult:
    """Regrow one component of a held-out phantom with its mass scaled."""
    cfg = ctx.cfg
    known = target_grids(cfg, 1)[0]
    ch = cfg.phantom.labels.index(cfg.inpaint_component)
    mask = editable_mask(known, ch, cfg.inpaint_dilation)
    sel = selection_for(cfg, [cfg.inpaint_component])
    measured = float(known[ch].mean())
    rows, hashes, checks = [], {}, {}
    for scale in cfg.inpaint_scales:
        cs = constraints_from_grids(known[None], sel, cfg.lambdas, cfg.w, mass_scale=scale).take(0)
        parts = {"inpaint": array_digest(known), "mask": array_digest(mask), "scale": scale,
                 "n": cfg.inpaint_samples, "cs": _cs_fingerprint(cs), "seed": cfg.seed,
                 "schedule": cfg.schedule.__dict__, "sampler": ctx.sampler().__dict__}
        grids = _cached(ctx, parts, lambda: inpaint(
            ctx.denoiser, cfg.schedule, cs, known, mask, cfg.inpaint_samples, cfg.seed, ctx.sampler()).grids)
        hashes[f"grids/x{scale:g}"] = array_digest(grids)
        outside = ~mask
        mismatches = int(sum(np.any(g[:, outside] != known[:, outside], axis=0).sum() for g in grids))
        achieved = grids[:, ch].reshape(len(grids), -1).mean(axis=1)
        target = measured * scale
        rel = np.abs(achieved - target) / target
        rows.append({
            "scale": scale, "measured_mass": measured, "target_mass": target,
            "achieved_mean": float(achieved.mean()), "rel_error_max": float(rel.max()),
            "rel_error_mean": float(rel.mean()), "mismatches_outside_mask": mismatches,
        })
        checks[f"x{scale:g}: zero mismatches outside mask"] = mismatches == 0
        checks[f"x{scale:g}: mass within 15% for every seed"] = bool(np.all(rel <= 0.15))
    details = {"component": cfg.inpaint_component, "mask_voxels": int(mask.sum()), "n": cfg.inpaint_samples}
    return RecipeResult("inpaint", rows, checks, details, hashes)


_RUNNERS = {"disentangle": disentangle, "wsweep": wsweep, "compose": compose, "inpaint": inpaint_recipe}


def run_recipe(name: str, cfg: ExperimentConfig, out: str | Path, use_cache: bool = False,
               pointcloud: bool = False) -> RecipeResult:
    if name not in _RUNNERS:
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPES}")
    with RunDirectory(out, cfg, {"recipe": name}) as run:
        ctx = Context.build(cfg, use_cache)
        result = _RUNNERS[name](ctx, pointcloud) if name == "disentangle" else _RUNNERS[name](ctx)
        report = json.dumps(_clean(result.to_dict()), indent=2, sort_keys=True) + "\n"
        run.file("report.json").write_text(report)
        write_csv(result.rows, run.file("table.csv"))
        _plot(result, run)
        result.hashes["report.json"] = hashlib.sha256(report.encode()).hexdigest()
        run.file("hashes.json").write_text(json.dumps(result.hashes, indent=2, sort_keys=True) + "\n")
    return result


def _plot(result: RecipeResult, run: RunDirectory) -> None:
    if result.name == "wsweep":
        w = [r["w"] for r in result.rows]
        series = {f: (w, [r[f"{f}_median_display"] for r in result.rows]) for f in FAMILIES}
        plot_svg(series, run.file("wsweep.svg"), "median fidelity vs w (display scaled)", "w", "L1", lines=True)
    elif result.name == "disentangle":
        x = list(range(len(result.rows)))
        series = {f: (x, [r[f"{f}_median_display"] for r in result.rows]) for f in FAMILIES}
        plot_svg(series, run.file("ablation.svg"), "median fidelity per loss (0=Uncond .. 4=L_geom)", "row", "L1")
    elif result.name == "compose":
        x = [r["n_constrained"] for r in result.rows]
        keys = [k for k in result.rows[0] if k.startswith("size_median_")]
        series = {k.removeprefix("size_median_"): (x, [r[k] for r in result.rows]) for k in keys}
        plot_svg(series, run.file("compose.svg"), "median size L1 per component", "constrained components", "L1")
