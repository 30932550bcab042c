"""Command implementations shared by the CLI and the experiment scripts.

Every command reads a validated :class:`~soslearn.config.RunConfig`, writes
only into its output directory and records enough provenance (config hash,
seeds, source dataset or model) to rerun it.  Outputs carry no timestamps,
so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .convolution import ForwardModel, model_from_path_builder
from .geometry import ImagingGrid, PairSchedule, trace_line_path, trace_window_path
from .inversion import DataError, apply_measurement_mask, reconstruct, sos_to_slowness
from .learning import TrainingSample, learn_model
from .metrics import EvalCase, EvalReport, compare_reports, evaluate_model
from .phantoms import generate_phantom, make_splits, synthesize_observation
from . import plotting

log = logging.getLogger(__name__)

BUILTIN_MODELS = ("line", "window")


def _noise_seed(sample_seed: int) -> int:
    return int(np.random.SeedSequence([sample_seed, 1]).generate_state(1)[0])


def data_config(cfg: RunConfig) -> dict:
    """The config sections that determine a dataset's contents."""
    keys = ("grid", "schedule", "beamforming", "window", "learning", "masking", "data")
    d = {k: cfg.raw[k] for k in keys}
    # only the kernel extent matters from the learning section
    d["learning"] = {"kernel_dims": list(cfg.kernel_dims)}
    return d


def handcrafted_model(cfg: RunConfig, kind: str) -> ForwardModel:
    if kind == "line":
        return model_from_path_builder(cfg.grid, cfg.schedule, trace_line_path,
                                       kernel_dims=cfg.kernel_dims)
    if kind == "window":
        return model_from_path_builder(cfg.grid, cfg.schedule, trace_window_path,
                                       kernel_dims=cfg.kernel_dims, window_cfg=cfg.window)
    raise ValueError(f"unknown hand-crafted model {kind!r}; expected one of {BUILTIN_MODELS}")


# ------------------------------------------------------------------ datasets

def gen_data(cfg: RunConfig, out_dir) -> dict:
    """Synthesise phantoms and delays for every split; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    truth = handcrafted_model(cfg, d["truth_model"])
    splits = make_splits(d["n_train"], d["n_val"], d["n_test"], d["seed"])
    spacing = (cfg.grid.dz, cfg.grid.dx)
    geo = {"grid": cfg.grid.to_dict(), "schedule": cfg.schedule.to_list()}
    samples = []
    for entry in splits:
        sid, seed = entry["id"], entry["seed"]
        ph = generate_phantom(cfg.phantom, seed)
        obs = synthesize_observation(ph, truth, cfg.beamforming, d["noise_sigma"],
                                     _noise_seed(seed), d["truth_model"])
        mask = apply_measurement_mask(obs.delays, cfg.masking["near_field_rows"],
                                      cfg.masking["edge_cols"]) & obs.mask
        sdir = out / sid
        io.write_array(sdir / "sos", ph.sos, "sos", "m/s", spacing, seed, geo)
        io.write_array(sdir / "inclusion", ph.inclusion_mask, "inclusion_mask", "", spacing, seed, geo)
        io.write_array(sdir / "background", ph.background_mask, "background_mask", "", spacing, seed, geo)
        io.write_array(sdir / "delays", obs.delays, "delays", "s", spacing, seed, geo)
        io.write_array(sdir / "mask", mask, "delay_mask", "", spacing, seed, geo)
        io.dump_json({"id": sid, "split": entry["split"], "seed": seed,
                      "noise_seed": _noise_seed(seed), "phantom": ph.meta}, sdir / "meta.json")
        samples.append({**entry, "dir": sid})
    dcfg = data_config(cfg)
    manifest = {"format": "soslearn-dataset", "dataset_id": io.config_hash(dcfg),
                "config": dcfg, "config_hash": io.config_hash(cfg.raw),
                "phantom_spec": cfg.phantom.to_dict(), "truth_model": d["truth_model"],
                "noise_sigma": d["noise_sigma"], "seed": d["seed"], **geo,
                "counts": {k: sum(s["split"] == k for s in samples) for k in ("train", "val", "test")},
                "samples": samples}
    io.dump_json(manifest, out / "manifest.json")
    log.info("wrote %d samples to %s", len(samples), out)
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if manifest.get("format") != "soslearn-dataset":
        raise DataError(f"{path}: not a dataset manifest")
    return manifest


def _check_geometry(what: str, grid: ImagingGrid, schedule: PairSchedule, cfg: RunConfig):
    if grid != cfg.grid:
        raise DataError(f"{what} grid {grid.to_dict()} does not match config grid {cfg.grid.to_dict()}")
    if schedule.to_list() != cfg.schedule.to_list():
        raise DataError(f"{what} schedule {schedule.to_list()} does not match "
                        f"config schedule {cfg.schedule.to_list()}")


def load_split(dataset_dir, split: str, cfg: RunConfig) -> tuple[dict, list[dict]]:
    """Arrays of every sample in ``split`` as dicts; validates grid and schedule."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    _check_geometry(f"dataset {root}", ImagingGrid.from_dict(manifest["grid"]),
                    PairSchedule.from_angles(manifest["schedule"]), cfg)
    out = []
    for entry in manifest["samples"]:
        if entry["split"] != split:
            continue
        sdir = root / entry["dir"]
        try:
            rec = {name: io.read_array(sdir / name)[0]
                   for name in ("sos", "inclusion", "background", "delays", "mask")}
        except FileNotFoundError as exc:
            raise DataError(f"sample {entry['id']}: {exc}") from None
        if rec["delays"].shape != (len(cfg.schedule),) + cfg.grid.shape:
            raise DataError(f"sample {entry['id']}: delays shape {rec['delays'].shape} "
                            f"does not match {len(cfg.schedule)} pairs on a {cfg.grid.shape} grid")
        rec["id"] = entry["id"]
        out.append(rec)
    if not out:
        raise DataError(f"dataset {root} has no {split!r} samples")
    return manifest, out


# ------------------------------------------------------------------ learning

def learn(cfg: RunConfig, dataset_dir, out_dir, split: str = "train") -> tuple[ForwardModel, list]:
    manifest, recs = load_split(dataset_dir, split, cfg)
    c0 = cfg.beamforming.c0
    samples = [TrainingSample(sos_to_slowness(r["sos"], c0), r["delays"], cfg.schedule,
                              None if r["mask"].all() else r["mask"]) for r in recs]
    mode = cfg.learning["mode"]
    model, fits = learn_model(samples, cfg.schedule, cfg.grid, cfg.kernel_dims, mode,
                              cfg.regularizer, cfg.n_c)
    out = Path(out_dir)
    fit_rows = [{"pair": list(f.pair.as_tuple()), "rmse_t": f.rmse_t, "n_rows": f.n_rows}
                for f in fits]
    io.save_model(model, out, mode, extra={
        "config_hash": io.config_hash(cfg.raw), "learning": cfg.learning,
        "dataset_id": manifest["dataset_id"], "training_ids": [r["id"] for r in recs],
        "fits": fit_rows})
    with open(out / "fit_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta1_deg", "theta2_deg", "rmse_t_s", "n_rows"])
        for f in fits:
            w.writerow([f.pair.theta1_deg, f.pair.theta2_deg, repr(f.rmse_t), f.n_rows])
    plotting.plot_kernels(model, out / "kernels.png", title=f"learned ({mode})")
    return model, fits


def resolve_model(spec: str, cfg: RunConfig) -> ForwardModel:
    """A model directory, or ``line`` / ``window`` for the hand-crafted models."""
    if spec in BUILTIN_MODELS and not Path(spec).is_dir():
        return handcrafted_model(cfg, spec)
    model, _ = io.load_model(spec)
    _check_geometry(f"model {spec}", model.grid, model.schedule, cfg)
    return model


# ------------------------------------------------------------ reconstruction

def _write_recon(out: Path, res, cfg: RunConfig, truth=None):
    spacing = (cfg.grid.dz, cfg.grid.dx)
    c0 = cfg.beamforming.c0
    io.write_array(out / "slowness", res.slowness, "relative_slowness", "s/m", spacing)
    io.write_array(out / "sos", res.sos, "sos", "m/s", spacing)
    io.write_pgm(out / "sos.pgm", io.sos_preview(res.sos, c0))
    with open(out / "objective.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "eps"])
        for i, (f, e) in enumerate(zip(res.objective_trace, res.eps_trace)):
            w.writerow([i, repr(float(f)), repr(float(e))])
    plotting.plot_sos_map(res.sos, cfg.grid, out / "sos.png", c0, truth=truth)


def reconstruct_file(cfg: RunConfig, model_spec: str, delays_path, out_dir,
                     mask_path=None, truth_path=None) -> dict:
    model = resolve_model(model_spec, cfg)
    try:
        delays, header = io.read_array(delays_path)
    except FileNotFoundError as exc:
        raise DataError(f"delays file not found: {exc.filename or delays_path}") from None
    sched = header.get("schedule")
    if sched is not None and sched != model.schedule.to_list():
        raise DataError(f"schedule mismatch: delays cover pairs {sched}, "
                        f"model covers {model.schedule.to_list()}")
    mask = io.read_array(mask_path)[0] if mask_path else None
    if mask is None and (cfg.masking["near_field_rows"] or cfg.masking["edge_cols"]):
        mask = apply_measurement_mask(delays, cfg.masking["near_field_rows"], cfg.masking["edge_cols"])
    res = reconstruct(model, delays, mask, cfg.beamforming, cfg.inversion)
    out = Path(out_dir)
    truth = io.read_array(truth_path)[0] if truth_path else None
    _write_recon(out, res, cfg, truth)
    summary = {"model_fingerprint": io.model_fingerprint(model),
               "delays_sha256": hashlib.sha256(delays.tobytes()).hexdigest()[:16],
               "config_hash": io.config_hash(cfg.raw), "iterations": res.iterations,
               "converged": bool(res.converged), "objective": res.objective,
               "sos_min": float(res.sos.min()), "sos_max": float(res.sos.max())}
    if truth is not None:
        summary["rmse_c"] = float(np.sqrt(np.mean((res.sos - truth) ** 2)))
    io.dump_json(summary, out / "summary.json")
    return summary


# ---------------------------------------------------------------- evaluation

def _eval_job(args):
    model, cases, bf, inv, mid, did = args
    return evaluate_model(model, cases, bf, inv, mid, did).rows


def _evaluate_parallel(model, cases, cfg, mid, did, workers):
    if workers <= 1 or len(cases) < 2:
        return evaluate_model(model, cases, cfg.beamforming, cfg.inversion, mid, did)
    chunks = [c for c in np.array_split(np.arange(len(cases)), workers) if c.size]
    jobs = [(model, [cases[i] for i in c], cfg.beamforming, cfg.inversion, mid, did) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        rows = [r for part in ex.map(_eval_job, jobs) for r in part]
    report = EvalReport(mid, did)
    report.rows.extend(rows)
    return report


def _write_table(path, report):
    cols = ["sample_id", "rmse_t", "rmse_c", "delta_sos", "iterations", "converged"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in report.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def evaluate(cfg: RunConfig, models: dict, dataset_dir, out_dir, split: str = "test",
             baseline: str | None = None) -> tuple[dict, dict]:
    """Evaluate named models on one split; writes tables, comparisons and boxplots.

    ``models`` maps a display name to a model directory or built-in name.
    """
    manifest, recs = load_split(dataset_dir, split, cfg)
    cases = [EvalCase(r["id"], r["sos"], r["inclusion"], r["background"], r["delays"],
                      None if r["mask"].all() else r["mask"]) for r in recs]
    did = manifest["dataset_id"]
    resolved = {name: resolve_model(spec, cfg) for name, spec in models.items()}
    reports = {name: _evaluate_parallel(m, cases, cfg, name, did, cfg.workers)
               for name, m in resolved.items()}
    base = baseline or next(iter(models))
    if base not in reports:
        raise DataError(f"baseline {base!r} is not among the evaluated models {list(models)}")
    comparisons = {n: compare_reports(reports[base], r) for n, r in reports.items() if n != base}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        _write_table(out / f"metrics_{name}.csv", rep)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["baseline", "candidate", "metric", "median_baseline", "median_candidate",
                    "improvement_pct", "symmetric_pct", "wilcoxon_statistic", "p_value", "n"])
        for name, comp in comparisons.items():
            for metric, c in comp.items():
                w.writerow([base, name, metric, repr(c["median_baseline"]), repr(c["median_candidate"]),
                            repr(c["improvement_pct"]), repr(c["symmetric_pct"]),
                            repr(c["wilcoxon_statistic"]), repr(c["p_value"]), c["n"]])
    io.dump_json({"dataset_id": did, "split": split, "baseline": base,
                  # fingerprints rather than paths keep reruns in other directories identical
                  "models": {n: {"builtin": s in BUILTIN_MODELS and not Path(s).is_dir(),
                                 "fingerprint": io.model_fingerprint(resolved[n])}
                             for n, s in models.items()},
                  "config_hash": io.config_hash(cfg.raw),
                  "summaries": {n: r.summary() for n, r in reports.items()},
                  "comparisons": comparisons}, out / "summary.json")
    plotting.plot_metric_boxplots(reports, out / "metrics_boxplot.png", comparisons)
    return reports, comparisons


def compare(cfg: RunConfig, dataset_dir, out_dir) -> tuple[dict, dict]:
    """Learn from the training split, then evaluate against the line model on the test split."""
    out = Path(out_dir)
    learn(cfg, dataset_dir, out / "model")
    return evaluate(cfg, {"line": "line", "learned": str(out / "model")}, dataset_dir,
                    out / "evaluation", baseline="line")


def info(path=None, cfg: RunConfig | None = None) -> dict:
    """Summary of a dataset or model directory, or of the resolved config."""
    if path is None:
        return {"config": cfg.raw, "config_hash": io.config_hash(cfg.raw),
                "kernel_dims": list(cfg.kernel_dims)}
    p = Path(path)
    if (p / "manifest.json").exists():
        m = load_manifest(p)
        return {k: m[k] for k in ("dataset_id", "truth_model", "noise_sigma", "seed", "counts",
                                  "grid", "schedule")}
    if (p / "model.json").exists():
        model, m = io.load_model(p)
        return {"mode": m["mode"], "grid": m["grid"], "schedule": m["schedule"],
                "kernel_shape": m["kernel_shape"], "fits": m.get("fits"),
                "dataset_id": m.get("dataset_id")}
    raise DataError(f"{p} is neither a dataset nor a model directory")

