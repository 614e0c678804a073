"""Data-generating processes for the three simulation cases.

Event times come from inverting each subject's cumulative hazard from its
entry time; measurements are kept only up to the subject's exit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from numpy.polynomial.legendre import leggauss
from scipy.stats import truncnorm

from app.config import ScenarioConfig, ScenarioOverrides
from app.errors import ConfigError, NumericError
from app.jointmodel import Dataset
from app.splines import KnotConfig, design_matrix
from app.trajectory import TrajectoryModel, WivSpec

logger = logging.getLogger(__name__)

HazardFn = Callable[[np.ndarray], np.ndarray]

CASE1_BETA = np.array([6.0, 3.0, 7.0, 1.0, 8.0, 5.0, 4.0])
CASE1_RE_VAR = np.array([3.0, 4.0, 4.0, 5.0, 4.0, 3.0, 4.0])
CASE1_KNOTS = (2.5, 5.0, 7.5)

# per-case DGP constants; log_scale depends on the curvature kind
CASE_DEFAULTS = {
    "case1": {"gamma": -2.0, "alpha1": 0.2, "alpha2": 0.3, "shape": 3.0, "sigma2_e": 1.0,
              "log_scale": {"current": -7.0, "cumulative": -8.0},
              "censoring": (6.0, 15.0), "cutoff": 10.0},
    "case2": {"gamma": -1.0, "alpha1": 0.3, "alpha2": 0.3, "shape": 3.0, "sigma2_e": 0.16,
              "log_scale": {"current": -6.5, "cumulative": -7.5},
              "censoring": (3.0, 10.0), "cutoff": 6.0},
}
CASE2_VISITS = np.concatenate([np.arange(6) * 0.4, 2.5 + 0.5 * np.arange(8)])


@dataclass
class SimulatedData:
    longitudinal: pd.DataFrame
    survival: pd.DataFrame
    truth: dict[str, float]
    true_mean: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def censoring_rate(self) -> float:
        return float(1.0 - self.survival["event"].mean())

    def visits_per_subject(self) -> pd.Series:
        return self.longitudinal.groupby("subject").size()

    def to_dataset(self) -> Dataset:
        return Dataset.from_frames(self.longitudinal, self.survival)


# ── Event-time inversion ────────────────────────────────────────────

def _checked(h: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise NumericError("hazard is negative or non-finite; cumulative hazard is not monotone")
    return h


def invert_cumulative_hazard(
    hazard_fn: HazardFn,
    entry: float,
    target: float,
    t_end: float,
    n_nodes: int = 15,
    n_panels: int = 64,
    tol: float = 1e-9,
) -> float:
    """Smallest t with H(t) − H(entry) = target, or +inf past t_end."""
    if t_end <= entry:
        return np.inf
    x, w = leggauss(n_nodes)
    edges = np.linspace(entry, t_end, n_panels + 1)
    half = 0.5 * np.diff(edges)[:, None]
    nodes = 0.5 * (edges[:-1] + edges[1:])[:, None] + half * x[None, :]
    h = _checked(np.asarray(hazard_fn(nodes.ravel()), dtype=float)).reshape(nodes.shape)
    cum = np.concatenate([[0.0], np.cumsum((half * w[None, :] * h).sum(axis=1))])
    if cum[-1] < target:
        return np.inf

    k = int(np.clip(np.searchsorted(cum, target, side="left") - 1, 0, n_panels - 1))
    remaining = target - cum[k]
    a, lo, hi = edges[k], edges[k], edges[k + 1]

    def partial(b: float) -> float:
        hb = 0.5 * (b - a)
        return float(hb * w @ _checked(np.asarray(hazard_fn(0.5 * (a + b) + hb * x), dtype=float)))

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if partial(mid) < remaining:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_event_time(hazard_fn: HazardFn, entry: float, rng: np.random.Generator, t_end: float,
                      n_nodes: int = 15) -> float:
    """Inverse-transform draw: solve H(t) − H(entry) = E with E ~ Exp(1)."""
    return invert_cumulative_hazard(hazard_fn, entry, rng.exponential(), t_end, n_nodes)


def weibull_log_h0(shape: float, log_scale: float) -> HazardFn:
    def log_h0(t: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return log_scale + np.log(shape) + (shape - 1.0) * np.log(t)
    return log_h0


def weibull_survival(t: np.ndarray, shape: float, log_scale: float) -> np.ndarray:
    return np.exp(-np.exp(log_scale) * np.asarray(t, dtype=float) ** shape)


# ── Helpers ─────────────────────────────────────────────────────────

def _parameters(cfg: ScenarioConfig) -> dict:
    base = CASE_DEFAULTS[cfg.case]
    params = {k: base[k] for k in ("gamma", "alpha1", "alpha2", "shape", "sigma2_e")}
    params["log_scale"] = base["log_scale"][cfg.wiv]
    params.update(_overrides(cfg.overrides))
    if cfg.null_alpha2:
        params["alpha2"] = 0.0
    return params


def _overrides(overrides: ScenarioOverrides) -> dict:
    return {k: v for k, v in overrides.model_dump().items() if v is not None and k != "zero_random_effects"}


def _spline_hazard(model: TrajectoryModel, pop: np.ndarray, subj_row: np.ndarray, spec: WivSpec,
                   log_h0: HazardFn, linear: float, offset: float, alpha1: float, alpha2: float) -> HazardFn:
    subj = subj_row[None, :]

    def hazard(t: np.ndarray) -> np.ndarray:
        pts = model.points(np.zeros(len(t), dtype=int), t, 1, spec)
        mu = model.mu(pts, pop, subj)
        wiv = model.wiv(pts, pop, subj, spec).value
        return np.exp(log_h0(t) + linear + alpha1 * (offset + mu) + alpha2 * wiv)

    return hazard


def _frames(rows_long: list[dict], rows_surv: list[dict], true_mean: list[float]):
    longitudinal = pd.DataFrame(rows_long)
    survival = pd.DataFrame(rows_surv)
    return longitudinal, survival, np.asarray(true_mean)


def _follow_up(event_time: float, censor_time: float, cutoff: float) -> tuple[float, int]:
    stop = min(censor_time, cutoff)
    if event_time <= stop:
        return float(event_time), 1
    return float(stop), 0


# ── Case 1 ──────────────────────────────────────────────────────────

def generate_case1(cfg: ScenarioConfig) -> SimulatedData:
    """Regression-spline trajectories on [0, 10], visits every 0.5."""
    if cfg.case != "case1":
        raise ValueError(f"generate_case1 called with case={cfg.case!r}")
    rng = np.random.default_rng(cfg.seed)
    p = _parameters(cfg)
    knots = KnotConfig.with_knots(0.0, 10.0, CASE1_KNOTS)
    model = TrajectoryModel.rspline(knots)
    spec = WivSpec(kind=cfg.wiv)
    log_h0 = weibull_log_h0(p["shape"], p["log_scale"])
    cens_lo, cens_hi = CASE_DEFAULTS["case1"]["censoring"]
    cutoff = CASE_DEFAULTS["case1"]["cutoff"]
    visits = np.arange(21) * 0.5

    rows_long, rows_surv, true_mean = [], [], []
    for i in range(cfg.n):
        x = float(rng.binomial(1, 0.5))
        b = np.zeros(7) if cfg.overrides.zero_random_effects else rng.normal(0.0, np.sqrt(CASE1_RE_VAR))
        hazard = _spline_hazard(model, CASE1_BETA, b, spec, log_h0, p["gamma"] * x, 0.0, p["alpha1"], p["alpha2"])
        t_event = sample_event_time(hazard, 0.0, rng, cutoff)
        exit, event = _follow_up(t_event, rng.uniform(cens_lo, cens_hi), cutoff)
        times = visits[visits <= exit]
        pts = model.points(np.zeros(len(times), dtype=int), times, 1)
        mu = model.mu(pts, CASE1_BETA, b[None, :])
        y = mu + rng.normal(0.0, np.sqrt(p["sigma2_e"]), len(times))
        rows_long += [{"subject": i + 1, "time": t, "value": v} for t, v in zip(times, y)]
        true_mean += list(mu)
        rows_surv.append({"subject": i + 1, "entry": 0.0, "exit": exit, "event": event, "cov1": x})

    longitudinal, survival, mean = _frames(rows_long, rows_surv, true_mean)
    truth = {"gamma[1]": p["gamma"], "alpha1": p["alpha1"], "alpha2": p["alpha2"],
             "sigma2_e": p["sigma2_e"], "shape": p["shape"], "log_scale": p["log_scale"]}
    return _finish(cfg, longitudinal, survival, truth, mean)


# ── Case 2 ──────────────────────────────────────────────────────────

def case2_mu(b: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    f1 = -((t - 3.0) ** 3) / 6.0 + (t - 3.0)
    return b[0] * f1 + b[1] + b[2] * np.sin(t)


def case2_mu_dd(b: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return -b[0] * (t - 3.0) - b[2] * np.sin(t)


def case2_cumulative_curvature(b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Closed form of ∫_0^t (μ'')² ds."""
    t = np.asarray(t, dtype=float)
    b1, b3 = b[0], b[2]
    cubic = ((t - 3.0) ** 3 + 27.0) / 3.0
    cross = -(t - 3.0) * np.cos(t) + np.sin(t) - 3.0
    sine = t / 2.0 - np.sin(2.0 * t) / 4.0
    return b1 ** 2 * cubic + 2.0 * b1 * b3 * cross + b3 ** 2 * sine


def generate_case2(cfg: ScenarioConfig) -> SimulatedData:
    """Cubic drift plus sinusoid on [0, 6] with an uneven visit schedule."""
    if cfg.case != "case2":
        raise ValueError(f"generate_case2 called with case={cfg.case!r}")
    rng = np.random.default_rng(cfg.seed)
    p = _parameters(cfg)
    log_h0 = weibull_log_h0(p["shape"], p["log_scale"])
    cens_lo, cens_hi = CASE_DEFAULTS["case2"]["censoring"]
    cutoff = CASE_DEFAULTS["case2"]["cutoff"]

    rows_long, rows_surv, true_mean = [], [], []
    for i in range(cfg.n):
        x = float(rng.binomial(1, 0.5))
        if cfg.overrides.zero_random_effects:
            b = np.array([1.25, 6.0, 1.0])
        else:
            b = np.array([rng.uniform(0.5, 2.0), rng.uniform(4.0, 8.0), rng.uniform(0.5, 1.5)])

        if cfg.wiv == "current":
            def wiv(t, b=b):
                return np.abs(case2_mu_dd(b, t))
        else:
            def wiv(t, b=b):
                return np.sqrt(np.maximum(case2_cumulative_curvature(b, t), 0.0))

        def hazard(t, b=b, x=x, wiv=wiv):
            return np.exp(log_h0(t) + p["gamma"] * x + p["alpha1"] * case2_mu(b, t) + p["alpha2"] * wiv(t))

        t_event = sample_event_time(hazard, 0.0, rng, cutoff)
        exit, event = _follow_up(t_event, rng.uniform(cens_lo, cens_hi), cutoff)
        times = CASE2_VISITS[CASE2_VISITS <= exit]
        mu = case2_mu(b, times)
        y = mu + rng.normal(0.0, np.sqrt(p["sigma2_e"]), len(times))
        rows_long += [{"subject": i + 1, "time": t, "value": v} for t, v in zip(times, y)]
        true_mean += list(mu)
        rows_surv.append({"subject": i + 1, "entry": 0.0, "exit": exit, "event": event, "cov1": x})

    longitudinal, survival, mean = _frames(rows_long, rows_surv, true_mean)
    truth = {"gamma[1]": p["gamma"], "alpha1": p["alpha1"], "alpha2": p["alpha2"],
             "sigma2_e": p["sigma2_e"], "shape": p["shape"], "log_scale": p["log_scale"]}
    return _finish(cfg, longitudinal, survival, truth, mean)


# ── Case 3 ──────────────────────────────────────────────────────────

def load_fixture(path: str | Path | None) -> dict:
    if path is None:
        raise ConfigError("case3 needs a generator fixture (scenario.fixture)")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"case3 fixture not found: {path}")
    try:
        fixture = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if fixture.get("kind") != "case3_generator":
        raise ConfigError(f"{path}: not a case3 generator fixture")
    return fixture


def generate_case3(cfg: ScenarioConfig, fixture: dict | None = None) -> SimulatedData:
    """Delayed entry, irregular visits, fitted R-spline joint model as generator."""
    if cfg.case != "case3":
        raise ValueError(f"generate_case3 called with case={cfg.case!r}")
    fixture = fixture or load_fixture(cfg.fixture)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = fixture["domain"]
    fit = dict(fixture[cfg.wiv])
    fit.update(_overrides(cfg.overrides))
    if np.ndim(fit["gamma"]) == 0:
        fit["gamma"] = [fit["gamma"]] * len(fixture[cfg.wiv]["gamma"])
    if cfg.null_alpha2:
        fit["alpha2"] = 0.0
    beta_l, gamma = np.asarray(fit["beta_L"], dtype=float), np.asarray(fit["gamma"], dtype=float)

    traj = fixture["trajectory"]
    model = TrajectoryModel.rspline(KnotConfig.with_knots(lo, hi, traj["interior_knots"]))
    pop = np.asarray(traj["beta"], dtype=float)
    re_sd = np.sqrt(np.asarray(traj["sigma2_b"], dtype=float))
    hz_cfg = KnotConfig.with_knots(lo, hi, fixture["hazard"]["interior_knots"])
    hz_coef = np.asarray(fixture["hazard"]["coef"], dtype=float)

    def log_h0(t):
        return design_matrix(hz_cfg, t) @ hz_coef

    spec = WivSpec(kind=cfg.wiv)
    ent = fixture["entry"]
    upper = (np.log(ent["upper"]) - ent["meanlog"]) / ent["sdlog"]
    entries = np.exp(truncnorm.rvs(-np.inf, upper, loc=ent["meanlog"], scale=ent["sdlog"],
                                   size=cfg.n, random_state=rng))
    p1, p2 = fixture["covariate_probs"]
    gap_lo, gap_hi = fixture["visit_gap"]
    fu_lo, fu_hi = fixture["censoring"]["followup"]
    admin = fixture["censoring"]["administrative"]

    rows_long, rows_surv, true_mean = [], [], []
    for i in range(cfg.n):
        entry = float(entries[i])
        w = np.array([rng.binomial(1, p1), rng.binomial(1, p2), entry / fixture["entry_covariate_divisor"]], dtype=float)
        b = np.zeros(len(pop)) if cfg.overrides.zero_random_effects else rng.normal(0.0, re_sd)
        hazard = _spline_hazard(model, pop, b, spec, log_h0, float(w @ gamma), float(w @ beta_l),
                                fit["alpha1"], fit["alpha2"])
        t_event = sample_event_time(hazard, entry, rng, admin)
        exit, event = _follow_up(t_event, entry + rng.uniform(fu_lo, fu_hi), admin)

        times = [entry]
        while True:
            nxt = times[-1] + rng.uniform(gap_lo, gap_hi)
            if nxt > exit:
                break
            times.append(nxt)
        times = np.asarray(times)
        pts = model.points(np.zeros(len(times), dtype=int), times, 1)
        mu = w @ beta_l + model.mu(pts, pop, b[None, :])
        y = mu + rng.normal(0.0, np.sqrt(fit["sigma2_e"]), len(times))
        cov = {"cov1": w[0], "cov2": w[1], "cov3": w[2]}
        rows_long += [{"subject": i + 1, "time": t, "value": v, **cov} for t, v in zip(times, y)]
        true_mean += list(mu)
        rows_surv.append({"subject": i + 1, "entry": entry, "exit": exit, "event": event, **cov})

    longitudinal, survival, mean = _frames(rows_long, rows_surv, true_mean)
    truth = {f"beta_L[{k + 1}]": float(v) for k, v in enumerate(beta_l)}
    truth.update({f"gamma[{k + 1}]": float(v) for k, v in enumerate(gamma)})
    truth.update(alpha1=float(fit["alpha1"]), alpha2=float(fit["alpha2"]), sigma2_e=float(fit["sigma2_e"]))
    return _finish(cfg, longitudinal, survival, truth, mean)


# ── Dispatch ────────────────────────────────────────────────────────

def _finish(cfg: ScenarioConfig, longitudinal: pd.DataFrame, survival: pd.DataFrame,
            truth: dict[str, float], true_mean: np.ndarray) -> SimulatedData:
    data = SimulatedData(longitudinal, survival, {k: float(v) for k, v in truth.items()}, true_mean,
                         meta={"case": cfg.case, "wiv": cfg.wiv, "n": cfg.n, "seed": cfg.seed,
                               "null_alpha2": cfg.null_alpha2})
    visits = data.visits_per_subject()
    logger.info(
        f"Simulated {cfg.case}/{cfg.wiv} n={cfg.n} seed={cfg.seed}: censoring {data.censoring_rate:.1%}, "
        f"visits per subject {visits.min()}-{visits.max()} (median {visits.median():.0f})"
    )
    return data


def generate(cfg: ScenarioConfig, fixture: dict | None = None) -> SimulatedData:
    if cfg.case == "case1":
        return generate_case1(cfg)
    if cfg.case == "case2":
        return generate_case2(cfg)
    return generate_case3(cfg, fixture)
