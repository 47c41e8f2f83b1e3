"""``manifold-probe`` command line.

Every command reads one JSON config in which every field has a default,
writes its artifacts into a fresh output directory and finishes with
``report.json``: the fully resolved config, the command payload and a
sha256 manifest of every other file written.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, gmw
from .autodiff import DiffMap
from .errors import (ArgumentError, CapacityError, DimensionError, ManifoldProbeError,
                     NumericalError, SpecError)
from .generators import (BlobFamily, GeneratorSpec, TrainConfig, blob_decoder_spec,
                         build_generator, deconv_spec, fit_blob_decoder, init_weights,
                         linear_spec, mlp_spec, orthogonal_generator, sample_latent,
                         shuffle_weights)
from .metric import DistanceMetric, compute_metric, feature_metric, hessian_full, pixel_metric
from .optim import (InversionConfig, cmaes_hessian_minimize, cmaes_minimize, default_eps_reg,
                    invert, make_preconditioner, traverse_axis)
from .report import (OutputDir, csv_text, image_grid, json_text, pgm_bytes, png_bytes,
                     quantize, svg_plot)
from .stats import (compare_distance_metrics, consistency_from_tensors, global_hessian,
                    summarize_spectrum)

log = logging.getLogger("manifold_probe")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "MANIFOLD_PROBE_THREADS"


class ConfigError(ManifoldProbeError, ValueError):
    """The run configuration is malformed."""


# ---------------------------------------------------------------------------
# configuration

GENERATOR_DEFAULTS = {
    "builtin": "blob",
    "latent_dim": 8,
    "output_dim": 64,
    "gain": 1.0,
    "seed": 0,
    "weights": None,
    "shuffle_seed": None,
    "train": {f.name: f.default for f in fields(TrainConfig)},
}

DISTANCE_DEFAULTS = {"kind": "pixel", "scale": 1.0, "encoder_seed": 1234, "widths": [128, 64]}

COMMON = {"seed": 0, "generator": GENERATOR_DEFAULTS, "record_timing": False}

DEFAULTS = {
    "build": {},
    "shuffle": {"shuffle_seed": 42},
    "spectra": {"distance": DISTANCE_DEFAULTS, "n_points": 100, "point_seed": 1,
                "method": "full_bp", "k": None, "tol": 1e-10, "plot": True},
    "consistency": {"distance": DISTANCE_DEFAULTS, "n_points": 20, "point_seed": 1,
                    "method": "full_bp", "k": None, "tol": 1e-10, "bins": 20},
    "axes": {"distance": DISTANCE_DEFAULTS, "n_points": 20, "point_seed": 1, "n_axes": 5,
             "bottom": True, "n_refs": 4, "ref_seed": 2, "steps": 4, "step_rule": "eigenvalue",
             "step_scale": 1.0, "eps_reg": None, "image_format": "pgm"},
    "invert": {"distance": DISTANCE_DEFAULTS, "n_targets": 20, "target_source": "generated",
               "target_file": None, "target_scale": 1.5, "noise_std": 0.0, "target_seed": 3,
               "n_points": 20, "point_seed": 1, "n_restarts": 4, "steps": 500, "lr": 0.05,
               "precond_k": None, "use_scales": False},
    "maximize": {"distance": DISTANCE_DEFAULTS, "n_seeds": 20, "budget": 200, "k": 4,
                 "sigma": 1.0, "n_points": 20, "point_seed": 1, "encoder_seed": 1234,
                 "widths": [128, 64]},
    "compare-metrics": {"n_points": 10, "point_seed": 1, "distance_a": DISTANCE_DEFAULTS,
                        "distance_b": dict(DISTANCE_DEFAULTS, kind="feature")},
}

COMMANDS = tuple(DEFAULTS)


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(defaults[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def resolve_config(command: str, given: dict | None) -> dict:
    """Defaults for ``command`` overlaid with ``given``; unknown keys are rejected."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    given = {} if given is None else given
    if not isinstance(given, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(dict(COMMON, **DEFAULTS[command]), given, "")


def load_config(command: str, path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        given = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve_config(command, given)


def _int(cfg, key, lo=None):
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{key!r} must be an integer")
    if lo is not None and val < lo:
        raise ConfigError(f"{key!r} must be >= {lo}")
    return val


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def pmap(fn, items) -> list:
    """Ordered map over ``items``; each result is ``(value, None)`` or ``(None, exc)``."""

    def guarded(item):
        try:
            return fn(item), None
        except NumericalError as exc:
            return None, exc

    items = list(items)
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [guarded(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


# ---------------------------------------------------------------------------
# generators and distances

_TRAINED: dict[str, tuple] = {}


def _train_blob(spec: GeneratorSpec, train: dict):
    key = json.dumps([spec.to_dict(), train], sort_keys=True)
    if key not in _TRAINED:
        try:
            cfg = TrainConfig(**train)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        res = fit_blob_decoder(BlobFamily(), spec, cfg)
        _TRAINED[key] = (res.decoder.weights, {"final_loss": res.final_loss,
                                               "epochs": res.epochs})
    return _TRAINED[key]


def load_generator(gcfg: dict) -> tuple[GeneratorSpec, DiffMap, dict]:
    """Build, train or load the configured generator; returns (spec, map, info)."""
    info: dict = {"seeds": {}}
    if gcfg["weights"]:
        spec, weights, header = gmw.load(gcfg["weights"])
        info["seeds"].update(header.get("seeds", {}))
        info["source"] = str(gcfg["weights"])
    else:
        n, seed, name = _int(gcfg, "latent_dim", 2), _int(gcfg, "seed", 0), gcfg["builtin"]
        weights = None
        if name == "linear":
            spec = linear_spec(n, _int(gcfg, "output_dim", 1), seed)
        elif name == "orthogonal":
            spec, weights = orthogonal_generator(n, _int(gcfg, "output_dim", 1),
                                                 float(gcfg["gain"]), seed)
        elif name == "mlp":
            spec = mlp_spec(n, 64, 256, seed)
        elif name == "deconv":
            spec = deconv_spec(n, seed)
        elif name == "blob":
            spec = blob_decoder_spec(n, seed=seed)
            weights, train_info = _train_blob(spec, gcfg["train"])
            info["train"] = train_info
            info["seeds"]["train"] = gcfg["train"]["seed"]
        else:
            raise ConfigError(f"unknown builtin generator {name!r}")
        weights = init_weights(spec) if weights is None else weights
        info["seeds"]["init"] = seed
        info["source"] = f"builtin:{name}"
    if gcfg["shuffle_seed"] is not None:
        weights = shuffle_weights(weights, _int(gcfg, "shuffle_seed", 0))
        info["seeds"]["shuffle"] = gcfg["shuffle_seed"]
    return spec, build_generator(spec, weights), info


def make_distance(dcfg: dict, output_dim: int) -> DistanceMetric:
    kind = dcfg["kind"]
    scale = float(dcfg["scale"])
    if kind == "pixel":
        return pixel_metric(scale)
    if kind == "feature":
        return feature_metric(output_dim, int(dcfg["encoder_seed"]), tuple(dcfg["widths"]),
                              scale)
    raise ConfigError(f"unknown distance kind {kind!r}")


def _points(spec, cfg, key="n_points", seed_key="point_seed", lo=1):
    return sample_latent(spec, _int(cfg, seed_key, 0), _int(cfg, key, lo))


def _global_h(gmap, distance, pts):
    rows = pmap(lambda z: hessian_full(gmap, distance, z), pts)
    tensors = [t for t, err in rows if err is None]
    if not tensors:
        raise NumericalError("every Hessian failed")
    return global_hessian(tensors)


def _tile_shape(spec: GeneratorSpec):
    if spec.image_hw is None:
        return 1, spec.output_dim
    h, w = spec.image_hw
    return spec.output_shape[2] * h, w


def _sign_test(wins: int, losses: int) -> float:
    """Two-sided exact sign test p-value, ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(0, min(wins, losses) + 1)) / 2.0 ** n
    return min(1.0, 2 * tail)


def _paired_summary(a, b, label_a, label_b) -> dict:
    a, b = np.asarray(a), np.asarray(b)
    diff = b - a
    return {
        f"median_{label_a}": float(np.median(a)),
        f"median_{label_b}": float(np.median(b)),
        "median_difference": float(np.median(b) - np.median(a)),
        "median_paired_difference": float(np.median(diff)),
        "difference_sign": int(np.sign(np.median(diff))),
        "max_abs_difference": float(np.max(np.abs(diff))),
        f"n_{label_b}_greater": int(np.sum(diff > 0)),
        f"n_{label_b}_less": int(np.sum(diff < 0)),
        "n_ties": int(np.sum(diff == 0)),
        "sign_test_p": _sign_test(int(np.sum(diff > 0)), int(np.sum(diff < 0))),
    }


# ---------------------------------------------------------------------------
# commands; each returns the report payload


def cmd_build(cfg, out: OutputDir) -> dict:
    spec, gmap, info = load_generator(cfg["generator"])
    seeds = dict(info["seeds"])
    data = gmw.dumps(spec, gmap.weights, seeds, {"source": info["source"],
                                                 "train": info.get("train")})
    out.write_bytes("generator.gmw", data)
    return {"n_params": gmap.weights.n_params, "latent_dim": spec.latent_dim,
            "output_shape": list(spec.output_shape), "train": info.get("train"),
            "seeds": seeds}


def cmd_shuffle(cfg, out: OutputDir) -> dict:
    spec, gmap, info = load_generator(cfg["generator"])
    seed = _int(cfg, "shuffle_seed", 0)
    shuffled = shuffle_weights(gmap.weights, seed)
    seeds = dict(info["seeds"], shuffle_applied=seed)
    out.write_bytes("shuffled.gmw", gmw.dumps(spec, shuffled, seeds, {"source": info["source"]}))
    return {"n_params": shuffled.n_params, "shuffle_seed": seed, "seeds": seeds}


def cmd_spectra(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    distance = make_distance(cfg["distance"], gmap.output_dim)
    pts = _points(spec, cfg)
    method, k = cfg["method"], cfg["k"]
    rows = pmap(lambda z: compute_metric(gmap, distance, z, method, k=k, tol=cfg["tol"],
                                         seed=cfg["seed"]), pts)
    failures = [{"point": i, "error": str(err)} for i, (_, err) in enumerate(rows) if err]
    good = [(i, t) for i, (t, err) in enumerate(rows) if err is None]
    if not good:
        raise NumericalError("metric computation failed at every point")
    out.write_text("spectra.csv", csv_text(
        ["point", "rank", "eigenvalue"],
        [(i, r + 1, lam) for i, t in good for r, lam in enumerate(t.eigenvalues)]))
    lam = np.array([t.eigenvalues for _, t in good])
    band = np.percentile(lam, [5, 95], axis=0)
    out.write_text("band.csv", csv_text(
        ["rank", "mean", "p05", "p95"],
        [(r + 1, lam[:, r].mean(), band[0, r], band[1, r]) for r in range(lam.shape[1])]))
    sums = [(i, summarize_spectrum(np.maximum(t.eigenvalues, 0.0)).row()) for i, t in good]
    cols = list(sums[0][1])
    out.write_text("summary.csv", csv_text(["point"] + cols,
                                           [[i] + [r[c] for c in cols] for i, r in sums]))
    if cfg["plot"]:
        ranks = np.arange(1, lam.shape[1] + 1)
        out.write_text("spectrum.svg", svg_plot(
            {"mean": (ranks, lam.mean(axis=0)), "p05": (ranks, band[0]),
             "p95": (ranks, band[1])}, "metric spectrum", log_y=True, xlabel="rank",
            ylabel="eigenvalue"))
    mean_row = {c: float(np.mean([r[c] for _, r in sums])) for c in cols}
    return {"n_points": len(pts), "n_failed": len(failures), "failures": failures,
            "method": method, "summary_mean": mean_row}


def cmd_consistency(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    distance = make_distance(cfg["distance"], gmap.output_dim)
    pts = _points(spec, cfg, lo=2)
    rows = pmap(lambda z: compute_metric(gmap, distance, z, cfg["method"], k=cfg["k"],
                                         tol=cfg["tol"], seed=cfg["seed"]), pts)
    tensors = [t for t, err in rows if err is None]
    failures = [{"point": i, "error": str(err)} for i, (_, err) in enumerate(rows) if err]
    if len(tensors) < 2:
        raise NumericalError("fewer than two metric tensors succeeded")
    rep = consistency_from_tensors(tensors, _int(cfg, "bins", 1))
    out.write_text("consistency.csv", rep.to_csv())
    out.write_text("histogram.json", json_text(rep.histogram))
    return {"summary": rep.summary, "n_failed": len(failures), "failures": failures}


def cmd_axes(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    distance = make_distance(cfg["distance"], gmap.output_dim)
    gh = _global_h(gmap, distance, _points(spec, cfg))
    refs = _points(spec, cfg, "n_refs", "ref_seed")
    n_axes = min(_int(cfg, "n_axes", 1), gh.n)
    steps = _int(cfg, "steps", 1)
    eps_reg = default_eps_reg(gh.eigenvalues) if cfg["eps_reg"] is None else float(cfg["eps_reg"])
    if cfg["step_rule"] not in ("eigenvalue", "uniform"):
        raise ConfigError(f"unknown step_rule {cfg['step_rule']!r}")
    if cfg["image_format"] not in ("pgm", "png", "both"):
        raise ConfigError(f"unknown image_format {cfg['image_format']!r}")
    axes = [("top", i) for i in range(n_axes)]
    if cfg["bottom"]:
        axes += [("bottom", gh.n - 1 - i) for i in range(n_axes)]
    th, tw = _tile_shape(spec)
    listing, errors = [], []
    for which, idx in axes:
        name = f"axis_{which}{(idx + 1 if which == 'top' else gh.n - idx):02d}"
        lam = float(gh.eigenvalues[idx])
        if cfg["step_rule"] == "eigenvalue":
            spacing = cfg["step_scale"] / math.sqrt(max(lam, 0.0) + eps_reg) / steps
        else:
            spacing = cfg["step_scale"] / steps
        u = gh.eigenvectors[:, idx]
        travs = [traverse_axis(gmap, z, u, steps, spacing, "linear", distance) for z in refs]
        out.write_text(f"{name}_curve.csv", csv_text(
            ["ref", "mu", "distance"],
            [(r, m, d) for r, t in enumerate(travs) for m, d in zip(t.mus, t.distances)]))
        tiles = np.stack([quantize(t.outputs).reshape(-1, th, tw) for t in travs])
        grid = image_grid(tiles)
        try:
            if cfg["image_format"] in ("pgm", "both"):
                out.write_bytes(f"{name}.pgm", pgm_bytes(grid))
            if cfg["image_format"] in ("png", "both"):
                out.write_bytes(f"{name}.png", png_bytes(grid))
        except OSError as exc:
            errors.append({"axis": name, "error": str(exc)})
        listing.append({"axis": name, "index": idx + 1, "eigenvalue": lam, "spacing": spacing})
    out.write_text("eigenvalues.csv", csv_text(
        ["rank", "eigenvalue"], [(i + 1, v) for i, v in enumerate(gh.eigenvalues)]))
    return {"axes": listing, "image_errors": errors, "grid": {"rows": "reference points",
                                                              "columns": "mu steps"}}


def _targets(cfg, spec, gmap) -> np.ndarray:
    src = cfg["target_source"]
    n = _int(cfg, "n_targets", 0)
    rng = np.random.default_rng(_int(cfg, "target_seed", 0))
    if src == "generated":
        z = cfg["target_scale"] * rng.standard_normal((n, spec.latent_dim))
        tg = gmap.forward(z) if n else np.zeros((0, gmap.output_dim))
    elif src == "blob":
        fam = BlobFamily()
        if spec.output_shape != (fam.height, fam.width, 1):
            raise ConfigError("blob targets need a generator with the blob image shape")
        tg = fam.render(fam.sample_params(rng, n)) if n else np.zeros((0, gmap.output_dim))
    elif src == "file":
        if not cfg["target_file"]:
            raise ConfigError("target_source 'file' needs target_file")
        path = Path(cfg["target_file"])
        tg = (np.load(path, allow_pickle=False) if path.suffix == ".npy"
              else np.loadtxt(path, delimiter=",", ndmin=2))
        tg = np.asarray(tg, dtype=np.float64).reshape(len(tg), -1) if len(tg) else tg
    else:
        raise ConfigError(f"unknown target_source {src!r}")
    if cfg["noise_std"] and len(tg):
        tg = tg + cfg["noise_std"] * rng.standard_normal(tg.shape)
    if len(tg) == 0:
        raise ArgumentError("target set is empty")
    return tg


def cmd_invert(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    distance = make_distance(cfg["distance"], gmap.output_dim)
    targets = _targets(cfg, spec, gmap)
    gh = _global_h(gmap, distance, _points(spec, cfg))
    precond = make_preconditioner(gh, cfg["precond_k"], use_scales=bool(cfg["use_scales"]))
    icfg = InversionConfig(_int(cfg, "n_restarts", 1), _int(cfg, "steps", 1), float(cfg["lr"]),
                           _int(cfg, "seed", 0))

    def run(i):
        # same restart inits for both arms so the comparison is paired
        c = InversionConfig(icfg.n_restarts, icfg.steps, icfg.lr, icfg.seed + i)
        return invert(gmap, distance, targets[i], c), invert(gmap, distance, targets[i], c, precond)

    results = pmap(run, range(len(targets)))
    rows, traces, failures, plain, pre = [], [], [], [], []
    for i, (res, err) in enumerate(results):
        if err is not None:
            failures.append({"target": i, "error": str(err)})
            continue
        a, b = res
        plain.append(a.best_loss)
        pre.append(b.best_loss)
        rows.append((i, a.best_loss, b.best_loss, b.best_loss - a.best_loss))
        for arm, r in (("plain", a), ("precond", b)):
            best = min((t for t in r.traces if t is not None), key=lambda t: t.best_loss)
            traces += [(arm, i, s, v) for s, v in enumerate(best.losses)]
    if not rows:
        raise NumericalError("every target failed")
    out.write_text("inversion.csv", csv_text(["target", "plain", "precond", "difference"], rows))
    out.write_text("traces.csv", csv_text(["arm", "target", "step", "loss"], traces))
    return {"n_targets": len(targets), "failures": failures,
            "paired": _paired_summary(plain, pre, "plain", "precond"),
            "loss": "d2 under the configured distance", "precond_mode": precond.mode}


def cmd_maximize(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    distance = make_distance(cfg["distance"], gmap.output_dim)
    gh = _global_h(gmap, distance, _points(spec, cfg))
    enc = feature_metric(gmap.output_dim, _int(cfg, "encoder_seed", 0),
                         tuple(cfg["widths"])).encoder
    n_units = enc.output_dim
    k, budget, sigma = _int(cfg, "k", 1), _int(cfg, "budget", 1), float(cfg["sigma"])
    base = _int(cfg, "seed", 0)

    def run(s):
        seed = base + s
        unit = int(np.random.default_rng(seed).integers(n_units))

        def f(z):
            return -float(enc.forward(gmap.forward(z))[unit])

        z0 = np.zeros(spec.latent_dim)
        a = cmaes_minimize(f, z0, sigma, budget, seed)
        b = cmaes_hessian_minimize(f, gh, k, budget, seed, z0, sigma)
        return seed, unit, a, b

    results = pmap(run, range(_int(cfg, "n_seeds", 1)))
    rows, failures, plain, hess = [], [], [], []
    for s, (res, err) in enumerate(results):
        if err is not None:
            failures.append({"run": s, "error": str(err)})
            continue
        seed, unit, a, b = res
        plain.append(-a.best_f)
        hess.append(-b.best_f)
        rows.append((seed, unit, -a.best_f, -b.best_f, a.best_f - b.best_f, a.evaluations,
                     b.evaluations))
    if not rows:
        raise NumericalError("every run failed")
    out.write_text("maximize.csv", csv_text(
        ["seed", "unit", "plain", "hessian", "difference", "evals_plain", "evals_hessian"], rows))
    return {"n_runs": len(rows), "failures": failures, "k": k, "budget": budget,
            "evaluations_equal": all(r[5] == r[6] for r in rows),
            "paired": _paired_summary(plain, hess, "plain", "hessian")}


def cmd_compare_metrics(cfg, out: OutputDir) -> dict:
    spec, gmap, _ = load_generator(cfg["generator"])
    da = make_distance(cfg["distance_a"], gmap.output_dim)
    db = make_distance(cfg["distance_b"], gmap.output_dim)
    rep = compare_distance_metrics(gmap, _points(spec, cfg), da, db)
    out.write_text("robustness.csv", rep.to_csv())
    table = {c: (None if v["mean"] is None else f"{v['mean']:.3f} ({v['std']:.3f})")
             for c, v in rep.summary.items()}
    return {"summary": rep.summary, "table": table}


HANDLERS = {
    "build": cmd_build, "shuffle": cmd_shuffle, "spectra": cmd_spectra,
    "consistency": cmd_consistency, "axes": cmd_axes, "invert": cmd_invert,
    "maximize": cmd_maximize, "compare-metrics": cmd_compare_metrics,
}


# ---------------------------------------------------------------------------


def run_command(command: str, cfg: dict, out_dir, force: bool = False) -> dict:
    """Run one resolved config into ``out_dir``; returns the report dict."""
    t0 = time.perf_counter()
    out = OutputDir(out_dir, force)
    payload = HANDLERS[command](cfg, out)
    report = {
        "tool": "manifold-probe",
        "version": __version__,
        "command": command,
        "config": cfg,
        "wall_clock_s": round(time.perf_counter() - t0, 3) if cfg["record_timing"] else None,
        "payload": payload,
        "manifest": out.manifest(),
    }
    out.write_text("report.json", json_text(report))
    log.info("%s: wrote %d files to %s", command, len(out.files), out.path)
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manifold-probe",
                                description="Latent-space geometry of small generative maps.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config; missing fields take defaults")
    p.add_argument("--out", default=None, help="output directory (default: out/<command>)")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config)
        out = args.out or os.path.join("out", args.command)
        run_command(args.command, cfg, out, args.force)
    except (ConfigError, SpecError, ArgumentError, DimensionError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
