"""Simulate, fit, LOO and report over output directories.

Replicate-level work runs through an asyncio coordinator that bounds
concurrency with a semaphore and hands each job to a process pool.
"""

from __future__ import annotations

import asyncio
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from app import __version__
from app.cache import get_all_cache_stats
from app.config import RunConfig, ScenarioConfig, config_hash, settings
from app.datastore import (
    BASIS_FILE,
    DIAGNOSTICS_FILE,
    DRAWS_FILE,
    LONGITUDINAL_FILE,
    LOO_FILE,
    POINTWISE_FILE,
    SUBJECTS_FILE,
    SUMMARY_FILE,
    SURVIVAL_FILE,
    TRAJECTORIES_FILE,
    TRUTH_FILE,
    RunManifest,
    directory_digests,
    file_digest,
    is_dataset_dir,
    is_fit_dir,
    load_dataset_frames,
    read_csv,
    read_json,
    read_manifest,
    save_dataset,
    save_npz,
    write_csv,
    write_json,
    write_manifest,
)
from app.diagnostics import flag_rhat
from app.errors import DataError
from app.evaluate import (
    LooResult,
    ReplicationResult,
    bias_cp_table,
    bias_cp_wide,
    compare_models,
    looic_long_table,
    survival_loo,
    to_inference_data,
)
from app.fpca import fit_fpca
from app.jointmodel import KEY_PARAMETERS, Dataset, HazardSpec, JointModel
from app.sampler import draws_from_frame, run_chains
from app.simulate import generate, load_fixture
from app.splines import KnotConfig, build_ortho_basis, rspline_knots
from app.trajectory import TrajectoryModel, WivSpec, export_trajectories

logger = logging.getLogger(__name__)

TRAJECTORY_GRID_POINTS = 101
POST_WARMUP_DIVERGENCE_WARN = 0.01


# ── Model construction ──────────────────────────────────────────────

def default_label(cfg: RunConfig) -> str:
    if cfg.model.representation == "rspline":
        return f"rspline-{cfg.model.rspline_knots}"
    return cfg.model.representation


def build_model(cfg: RunConfig, data: Dataset) -> tuple[JointModel, dict[str, np.ndarray]]:
    """Bases, optional FPCA pre-step and the joint model for one dataset."""
    m = cfg.model
    hi = data.t_max
    hints: dict[str, np.ndarray] = {}
    basis: dict[str, np.ndarray] = {}
    mean_cfg = KnotConfig.equally_spaced(0.0, hi, m.mean_basis)

    if m.representation == "rspline":
        knots = rspline_knots(data.obs_time, m.rspline_knots, 0.0, hi)
        trajectory = TrajectoryModel.rspline(knots)
        basis = {"kind_detail": np.array("rspline"), "knots": np.asarray(knots.knot_vector)}
    elif m.representation == "pspline":
        ortho = build_ortho_basis(KnotConfig.equally_spaced(0.0, hi, m.raw_basis), m.ortho_grid, m.ortho_pve)
        trajectory = TrajectoryModel.pspline(mean_cfg, ortho)
        basis = {"kind_detail": np.array("pspline"), "grid": ortho.grid, "coeffs": ortho.coeffs,
                 "eigenvalues": ortho.eigenvalues, "knots": ortho.cfg.knot_vector}
    elif m.representation == "fpca":
        fit = fit_fpca(data.longitudinal_frame(), mean_cfg, m.fpca_grid, m.fpca_pve)
        trajectory = TrajectoryModel.fpca(mean_cfg, fit.family, fit.eigen)
        hints = {"mean_coeffs": fit.mean_coeffs, "nu2": fit.eigen.eigenvalues}
        basis = {"kind_detail": np.array("fpca"), "grid": fit.eigen.grid,
                 "eigenfunctions": fit.eigen.eigenfunctions, "eigenvalues": fit.eigen.eigenvalues,
                 "mean_coeffs": fit.mean_coeffs, "covariance": fit.surface.values}
    else:
        trajectory = TrajectoryModel.smre(mean_cfg)
        basis = {"kind_detail": np.array("smre"), "knots": mean_cfg.knot_vector}

    if cfg.hazard.kind == "weibull":
        hazard = HazardSpec.weibull(cfg.hazard.quadrature_nodes)
    else:
        hazard = HazardSpec.spline(data.exit, data.event, hi, cfg.hazard.knot_quantile, cfg.hazard.quadrature_nodes)
    wiv = WivSpec(kind=m.wiv, window=m.window)
    model = JointModel(data, trajectory, hazard, wiv, cfg.priors, init_hints=hints)
    model.include_subjects = cfg.sampler.save_subject_effects
    return model, basis


# ── Units of work ───────────────────────────────────────────────────

def simulate_dataset(scenario: ScenarioConfig, out_dir: str, cfg_hash: str, replicate: int | None = None,
                     fixture: dict | None = None) -> dict[str, Any]:
    manifest = RunManifest(command="simulate", config_hash=cfg_hash, seed=scenario.seed,
                           config={"scenario": scenario.model_dump()})
    sim = generate(scenario, fixture)
    provenance = {"seed": scenario.seed, "config_hash": cfg_hash, "case": scenario.case, "wiv": scenario.wiv,
                  "replicate": replicate if replicate is not None else "-", "code_version": __version__}
    truth = {"parameters": sim.truth, "meta": {**sim.meta, "replicate": replicate}}
    save_dataset(out_dir, sim.longitudinal, sim.survival, truth, provenance)
    manifest.extra = {"replicate": replicate, "censoring_rate": sim.censoring_rate,
                      "n_measurements": len(sim.longitudinal)}
    write_manifest(out_dir, manifest)
    return {"status": "ok", "out_dir": str(out_dir), "replicate": replicate, "censoring_rate": sim.censoring_rate}


def _summary_payload(summary: pd.DataFrame) -> dict[str, dict[str, float]]:
    return {
        row["parameter"]: {k: row[k] for k in ("mean", "sd", "q2.5", "q97.5", "rhat", "ess_bulk", "mcse_mean")}
        for row in summary.to_dict(orient="records")
    }


def fit_dataset(cfg: RunConfig, data_dir: str, out_dir: str, label: str | None = None,
                chain_jobs: int = 1) -> dict[str, Any]:
    """Fit one dataset and write draws, diagnostics and sidecars to out_dir."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    cfg_hash = config_hash(cfg)
    manifest = RunManifest(command="fit", config_hash=cfg_hash, seed=cfg.sampler.seed, config=cfg.model_dump())
    long_df, surv_df = load_dataset_frames(data_dir)
    data = Dataset.from_frames(long_df, surv_df, cfg.model.longitudinal_covariates, cfg.model.survival_covariates)
    model, basis = build_model(cfg, data)

    if chain_jobs > 1 and cfg.sampler.chains > 1:
        with ProcessPoolExecutor(max_workers=min(chain_jobs, cfg.sampler.chains)) as pool:
            draws = run_chains(model, cfg.sampler, pool)
    else:
        draws = run_chains(model, cfg.sampler)

    summary = draws.summary()
    flagged = flag_rhat(summary, KEY_PARAMETERS)
    diagnostics = draws.sampler_diagnostics()
    seconds = diagnostics.pop("seconds")
    divergent_fraction = diagnostics["divergent"] / max(1, draws.divergent.size)
    if divergent_fraction > POST_WARMUP_DIVERGENCE_WARN:
        logger.warning(f"{divergent_fraction:.1%} of post-warmup transitions diverged")
    if draws.degenerate_draws:
        logger.warning(f"{draws.degenerate_draws} draws had a degenerate SMRE scale constraint")

    label = label or default_label(cfg)
    provenance = {"config_hash": cfg_hash, "seed": cfg.sampler.seed, "label": label, "code_version": __version__}
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(draws.to_frame(), out_dir / DRAWS_FILE, provenance)
    np.save(out_dir / POINTWISE_FILE, draws.pointwise)
    np.save(out_dir / SUBJECTS_FILE, np.asarray(data.subject_ids))
    save_npz(out_dir / BASIS_FILE, "basis", **basis)
    write_json(out_dir / SUMMARY_FILE, _summary_payload(summary))
    write_json(out_dir / DIAGNOSTICS_FILE, {
        **diagnostics,
        "divergent_fraction": divergent_fraction,
        "rhat_flagged": flagged,
        "max_rhat": float(np.nanmax(summary["rhat"])) if summary["rhat"].notna().any() else None,
        "min_ess_bulk": float(np.nanmin(summary["ess_bulk"])) if summary["ess_bulk"].notna().any() else None,
        "dimension": model.dim,
        "subjects": data.n,
        "measurements": data.n_obs,
    })
    grid = np.linspace(0.0, data.t_max, TRAJECTORY_GRID_POINTS)
    write_csv(export_trajectories(model.trajectory, draws.pop_mean, draws.subj_mean, data.subject_ids, grid,
                                  model.wiv_spec),
              out_dir / TRAJECTORIES_FILE, provenance)
    replicate = None
    if (data_dir / TRUTH_FILE).exists():
        truth = read_json(data_dir / TRUTH_FILE)
        write_json(out_dir / TRUTH_FILE, truth)
        replicate = truth.get("meta", {}).get("replicate")

    inputs = {name: file_digest(data_dir / name) for name in (LONGITUDINAL_FILE, SURVIVAL_FILE)}
    manifest.inputs = inputs
    manifest.extra = {"label": label, "replicate": replicate, "data_dir": str(data_dir),
                      "data_digest": "".join(inputs[k] for k in sorted(inputs)), "rhat_flagged": flagged,
                      "sampling_seconds": seconds, "caches": get_all_cache_stats()}
    write_manifest(out_dir, manifest)
    return {"status": "flagged" if flagged else "ok", "out_dir": str(out_dir), "label": label,
            "replicate": replicate, "flagged": flagged, "seconds": draws.seconds}


def compute_loo(fit_dir: Path) -> LooResult:
    pointwise = np.load(fit_dir / POINTWISE_FILE)
    subjects = np.load(fit_dir / SUBJECTS_FILE) if (fit_dir / SUBJECTS_FILE).exists() else None
    draws, names = None, None
    try:
        if (fit_dir / DRAWS_FILE).exists():
            draws, names = draws_from_frame(read_csv(fit_dir / DRAWS_FILE, "draws"))
        idata = to_inference_data(pointwise, draws, names)
    except ValueError as e:
        raise DataError(f"{fit_dir}: {e}") from e
    return survival_loo(idata, subjects)


def loo_fit(fit_dir: str | Path) -> dict[str, Any]:
    """Write loo.json into a fit directory and refresh its manifest."""
    fit_dir = Path(fit_dir)
    if not (fit_dir / POINTWISE_FILE).exists():
        raise DataError(f"missing pointwise log-likelihood sidecar: {fit_dir / POINTWISE_FILE}")
    manifest = read_manifest(fit_dir)
    manifest.started_at = time.time()
    result = compute_loo(fit_dir)
    payload = {**result.to_dict(), "elpd_pointwise": result.pointwise, "pareto_k": result.pareto_k}
    write_json(fit_dir / LOO_FILE, payload)
    manifest.extra = {**manifest.extra, "loo": result.to_dict()}
    write_manifest(fit_dir, manifest)
    logger.info(f"LOOIC {result.looic:.2f} (SE {result.looic_se:.2f}), max k {result.max_k:.2f}")
    return {"status": result.status, **result.to_dict()}


def report_study(study_dir: str | Path, out_dir: str | Path) -> dict[str, Any]:
    """Aggregate fit directories into bias/CP, LOOIC and comparison tables."""
    study_dir, out_dir = Path(study_dir), Path(out_dir)
    manifest = RunManifest(command="report")
    fit_dirs = sorted(p.parent for p in study_dir.rglob(SUMMARY_FILE)
                      if out_dir not in p.parents and is_fit_dir(p.parent))
    if not fit_dirs:
        raise DataError(f"no fit directories under {study_dir}")

    results: list[ReplicationResult] = []
    loos: dict[tuple[Any, str], tuple[LooResult, str]] = {}
    truth: dict[str, float] | None = None
    for index, fit_dir in enumerate(fit_dirs):
        fit_manifest = read_manifest(fit_dir)
        label = fit_manifest.extra.get("label") or fit_dir.name
        replicate = fit_manifest.extra.get("replicate")
        replicate = index if replicate is None else replicate
        summary = pd.DataFrame([{"parameter": k, **v} for k, v in read_json(fit_dir / SUMMARY_FILE).items()])
        loo = compute_loo(fit_dir) if (fit_dir / POINTWISE_FILE).exists() else None
        results.append(ReplicationResult.from_summary(replicate, label, summary, loo.to_dict() if loo else None))
        if loo is not None:
            loos[(replicate, label)] = (loo, fit_manifest.extra.get("data_digest", ""))
        if (fit_dir / TRUTH_FILE).exists():
            this_truth = read_json(fit_dir / TRUTH_FILE)["parameters"]
            if truth is None:
                truth = this_truth
            elif this_truth != truth:
                logger.warning(f"{fit_dir}: truth differs from the first replicate; scoring against the first")

    counts = pd.Series([r.approach for r in results]).value_counts()
    if counts.nunique() > 1:
        logger.warning(f"Incomplete replicate set: {counts.to_dict()}")

    out_dir.mkdir(parents=True, exist_ok=True)
    if truth:
        shared = [name for name in truth if all(name in r.estimates for r in results)]
        dropped = sorted(set(truth) - set(shared))
        if dropped:
            logger.warning(f"Not scored (missing from some approaches): {', '.join(dropped)}")
        table = bias_cp_table(results, {k: truth[k] for k in shared})
        write_csv(bias_cp_wide(table), out_dir / "bias_cp.csv")
    else:
        logger.warning("No truth.json found; bias/CP table skipped")
    write_csv(looic_long_table(results), out_dir / "looic.csv")

    rows = []
    for replicate in sorted({rep for rep, _ in loos}, key=str):
        group = {label: pair for (rep, label), pair in loos.items() if rep == replicate}
        if len(group) < 2:
            continue
        if len({digest for _, digest in group.values()}) > 1:
            logger.warning(f"Replicate {replicate}: approaches were fitted to different data; not compared")
            continue
        comparison = compare_models({label: pair[0] for label, pair in sorted(group.items())})
        comparison.insert(0, "replicate", replicate)
        rows.append(comparison)
    if rows:
        write_csv(pd.concat(rows, ignore_index=True), out_dir / "comparison.csv")

    manifest.extra = {"fits": len(fit_dirs), "replicates_per_approach": counts.to_dict()}
    write_manifest(out_dir, manifest)
    return {"status": "ok", "fits": len(fit_dirs), "approaches": counts.to_dict()}


# ── Coordinator ─────────────────────────────────────────────────────

@dataclass
class Job:
    key: str
    fn: Callable[..., dict]
    args: tuple = field(default_factory=tuple)


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n)]


def _log_progress(stage: str, payload: dict):
    if stage == "result":
        logger.info(f"Job {payload.get('key')}: {payload.get('status')}")


async def run_jobs(jobs: list[Job], n_workers: int, progress_callback=None, cancel_event=None) -> dict[str, Any]:
    """Run jobs in a process pool; exceptions become error records."""
    progress_callback = progress_callback or _log_progress
    start_time = time.time()
    progress_callback("init", {"total": len(jobs)})
    semaphore = asyncio.Semaphore(n_workers)
    loop = asyncio.get_running_loop()

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        async def _run_with_semaphore(job: Job):
            if cancel_event and cancel_event.is_set():
                return {"key": job.key, "status": "skipped", "reason": "cancelled"}
            async with semaphore:
                progress_callback("current", {"key": job.key})
                result = await loop.run_in_executor(pool, job.fn, *job.args)
                result = {"key": job.key, **result}
                progress_callback("result", result)
                return result

        results = await asyncio.gather(*[_run_with_semaphore(j) for j in jobs], return_exceptions=True)

    clean_results = []
    for job, result in zip(jobs, results):
        if isinstance(result, Exception):
            logger.error(f"Job {job.key} failed: {type(result).__name__}: {result}")
            clean_results.append({"key": job.key, "status": "error", "error": str(result),
                                  "exit_code": getattr(result, "exit_code", 1)})
        else:
            clean_results.append(result)

    elapsed = time.time() - start_time
    done = sum(1 for r in clean_results if r["status"] in ("ok", "flagged"))
    flagged = sum(1 for r in clean_results if r["status"] == "flagged")
    errors = sum(1 for r in clean_results if r["status"] == "error")
    per_minute = (done / (elapsed / 60)) if elapsed > 0 and done > 0 else 0
    logger.info(f"Jobs complete: {done} done ({flagged} flagged), {errors} errors | {elapsed:.1f}s | {per_minute:.1f} jobs/min")
    return {
        "total": len(jobs),
        "done": done,
        "flagged": flagged,
        "errors": errors,
        "elapsed_seconds": round(elapsed, 1),
        "jobs_per_minute": round(per_minute, 1),
        "results": clean_results,
    }


def simulate_study(scenario: ScenarioConfig, out_dir: str | Path, replicates: int = 1, jobs: int | None = None,
                   cfg_hash: str | None = None) -> dict[str, Any]:
    out_dir = Path(out_dir)
    cfg_hash = cfg_hash or config_hash(scenario)
    fixture = load_fixture(scenario.fixture) if scenario.case == "case3" else None
    if replicates == 1:
        return simulate_dataset(scenario, str(out_dir), cfg_hash, None, fixture)

    manifest = RunManifest(command="simulate", config_hash=cfg_hash, seed=scenario.seed,
                           config={"scenario": scenario.model_dump()})
    seeds = derive_seeds(scenario.seed, replicates)
    work = [
        Job(f"rep_{k + 1:03d}", simulate_dataset,
            (scenario.model_copy(update={"seed": s}), str(out_dir / f"rep_{k + 1:03d}"), cfg_hash, k + 1, fixture))
        for k, s in enumerate(seeds)
    ]
    summary = asyncio.run(run_jobs(work, jobs or settings.effective_jobs))
    manifest.extra = {"replicates": replicates, "seeds": seeds, "errors": summary["errors"]}
    write_manifest(out_dir, manifest)
    return summary


def fit_study(cfg: RunConfig, data_root: str | Path, out_root: str | Path, jobs: int | None = None,
              label: str | None = None) -> dict[str, Any]:
    data_root, out_root = Path(data_root), Path(out_root)
    jobs = jobs or settings.effective_jobs
    if not data_root.exists():
        raise DataError(f"data directory not found: {data_root}")
    if is_dataset_dir(data_root):
        return fit_dataset(cfg, str(data_root), str(out_root), label, chain_jobs=jobs)

    replicate_dirs = sorted(d for d in data_root.iterdir() if d.is_dir() and is_dataset_dir(d))
    if not replicate_dirs:
        raise DataError(f"no longitudinal/survival CSVs under {data_root}")
    manifest = RunManifest(command="fit", config_hash=config_hash(cfg), seed=cfg.sampler.seed,
                           config=cfg.model_dump(), inputs=directory_digests(data_root))
    work = [Job(d.name, fit_dataset, (cfg, str(d), str(out_root / d.name), label, 1)) for d in replicate_dirs]
    summary = asyncio.run(run_jobs(work, jobs))
    manifest.extra = {"replicates": len(work), "errors": summary["errors"], "flagged": summary["flagged"],
                      "label": label or default_label(cfg)}
    write_manifest(out_root, manifest)
    return summary
