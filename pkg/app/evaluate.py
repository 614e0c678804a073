"""Replication metrics and survival-based PSIS-LOO."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable

import arviz as az
import numpy as np
import pandas as pd
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

K_WARN = 0.7
K_UNRELIABLE = 1.0
LOGLIK_VAR = "survival"


# ── Pareto-smoothed importance sampling ─────────────────────────────

def to_inference_data(pointwise: np.ndarray, draws: np.ndarray | None = None,
                      names: list[str] | None = None) -> az.InferenceData:
    """InferenceData with the survival log-likelihood and, when given, the tracked draws.

    pointwise is (chains, draws, subjects) or (draws, subjects); draws is
    (chains, draws, params) in the order of names.
    """
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim == 2:
        ll = ll[None, :, :]
    if ll.ndim != 3:
        raise ValueError(f"pointwise log-likelihood must be 2-D or 3-D, got shape {ll.shape}")
    posterior = None
    if draws is not None:
        draws = np.asarray(draws, dtype=float)
        if names is None or draws.ndim != 3 or draws.shape[2] != len(names):
            raise ValueError(f"draws shape {draws.shape} does not match the parameter names")
        if draws.shape[:2] != ll.shape[:2]:
            raise ValueError(f"draws {draws.shape[:2]} and log-likelihood {ll.shape[:2]} disagree on (chains, draws)")
        posterior = {name: draws[:, :, j] for j, name in enumerate(names)}
    return az.from_dict(posterior=posterior, log_likelihood={LOGLIK_VAR: ll})


def relative_efficiency(idata: az.InferenceData) -> float:
    """Mean relative ESS of the posterior; 1 for a single chain or no posterior.

    Constant parameters have no ESS and are left out of the mean.
    """
    if "posterior" not in idata.groups():
        return 1.0
    posterior = idata.posterior
    n_chains, n_draws = posterior.sizes["chain"], posterior.sizes["draw"]
    if n_chains == 1:
        return 1.0
    ess = az.ess(posterior, method="mean")
    values = np.concatenate([np.ravel(ess[v].values) for v in ess.data_vars])
    values = values[np.isfinite(values)]
    if values.size == 0:
        return 1.0
    return float(values.mean() / (n_chains * n_draws))


def psis_smooth(log_ratios: np.ndarray, reff: float = 1.0) -> tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios.

    Returns normalized log weights and the tail shape estimate. A single
    draw, or a tail of four or fewer draws, gets k = inf.
    """
    x = np.array(log_ratios, dtype=float)
    if x.size < 2:
        return x - logsumexp(x), np.inf
    lw, k = az.psislw(x, reff)
    return np.asarray(lw, dtype=float), float(k)


# ── LOO ─────────────────────────────────────────────────────────────

@dataclass
class LooResult:
    elpd: float
    elpd_se: float
    p_loo: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    subject_ids: np.ndarray | None = None

    @property
    def looic(self) -> float:
        return -2.0 * self.elpd

    @property
    def looic_se(self) -> float:
        return 2.0 * self.elpd_se

    @property
    def max_k(self) -> float:
        return float(np.max(self.pareto_k))

    @property
    def status(self) -> str:
        if np.any(self.pareto_k >= K_UNRELIABLE):
            return "unreliable"
        if np.any(self.pareto_k > K_WARN):
            return "warn"
        return "ok"

    def to_dict(self) -> dict:
        return {
            "looic": self.looic,
            "looic_se": self.looic_se,
            "elpd_loo": self.elpd,
            "elpd_se": self.elpd_se,
            "p_loo": self.p_loo,
            "max_pareto_k": self.max_k,
            "n_k_above_0.7": int(np.sum(self.pareto_k > K_WARN)),
            "status": self.status,
        }


def survival_loo(data: np.ndarray | az.InferenceData, subject_ids: np.ndarray | None = None) -> LooResult:
    """PSIS-LOO of the survival log-likelihood.

    data is an InferenceData with a "survival" log-likelihood, or a raw
    (draws, subjects) / (chains, draws, subjects) array.
    """
    idata = data if isinstance(data, az.InferenceData) else to_inference_data(data)
    ll = np.asarray(idata.log_likelihood[LOGLIK_VAR].values, dtype=float)
    if ll.ndim != 3:
        raise ValueError(f"survival log-likelihood must be (chains, draws, subjects), got shape {ll.shape}")
    if not np.all(np.isfinite(ll)):
        raise ValueError("pointwise log-likelihood has non-finite entries")
    s, n = ll.shape[0] * ll.shape[1], ll.shape[2]

    if s == 1:
        elpd_i = ll.reshape(n).copy()
        k = np.full(n, np.inf)
        elpd, p_loo = float(elpd_i.sum()), 0.0
        elpd_se = float(np.sqrt(n * np.var(elpd_i)))
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            loo = az.loo(idata, pointwise=True, var_name=LOGLIK_VAR, reff=relative_efficiency(idata), scale="log")
        elpd_i = np.asarray(loo.loo_i.values, dtype=float)
        k = np.asarray(loo.pareto_k.values, dtype=float)
        elpd, elpd_se, p_loo = float(loo.elpd_loo), float(loo.se), float(loo.p_loo)

    result = LooResult(
        elpd=elpd,
        elpd_se=elpd_se,
        p_loo=p_loo,
        pointwise=elpd_i,
        pareto_k=k,
        subject_ids=None if subject_ids is None else np.asarray(subject_ids),
    )
    if result.status != "ok":
        logger.warning(
            f"PSIS-LOO {result.status}: {int(np.sum(k > K_WARN))} of {n} subjects have Pareto k > {K_WARN} "
            f"(max {result.max_k:.2f})"
        )
    return result


def compare_models(loos: dict[str, LooResult]) -> pd.DataFrame:
    """Pairwise LOOIC differences (row model minus column model) with paired SE and z."""
    names = list(loos)
    if len(names) < 2:
        raise ValueError("compare_models needs at least two models")
    first = loos[names[0]]
    for name in names[1:]:
        other = loos[name]
        if len(other.pointwise) != len(first.pointwise):
            raise ValueError(f"model {name!r} has {len(other.pointwise)} subjects, expected {len(first.pointwise)}")
        if (first.subject_ids is not None and other.subject_ids is not None
                and not np.array_equal(first.subject_ids, other.subject_ids)):
            raise ValueError(f"model {name!r} was fitted to a different subject set")

    ranks = pd.Series({n: loos[n].looic for n in names}).rank(method="min").astype(int)
    rows = []
    for a, b in combinations(names, 2):
        diff_i = -2.0 * (loos[a].pointwise - loos[b].pointwise)
        diff = float(diff_i.sum())
        se = float(np.sqrt(len(diff_i) * np.var(diff_i)))
        if se > 0:
            z = diff / se
        else:
            z = 0.0 if diff == 0 else float(np.sign(diff) * np.inf)
        rows.append({"model_a": a, "model_b": b, "looic_diff": diff, "se": se, "z": z,
                     "rank_a": int(ranks[a]), "rank_b": int(ranks[b])})
    return pd.DataFrame(rows)


# ── Replication summaries ───────────────────────────────────────────

@dataclass
class ReplicationResult:
    replicate: int
    approach: str
    estimates: dict[str, tuple[float, float, float]]    # name -> (mean, lower, upper)
    looic: float | None = None
    looic_se: float | None = None
    max_k: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (_, lo, hi) in self.estimates.items():
            if lo > hi:
                raise ValueError(f"{name}: interval lower {lo} exceeds upper {hi}")

    @classmethod
    def from_summary(cls, replicate: int, approach: str, summary: pd.DataFrame,
                     loo: dict | None = None) -> "ReplicationResult":
        estimates = {
            row.parameter: (float(row.mean), float(row.lower), float(row.upper))
            for row in summary.rename(columns={"q2.5": "lower", "q97.5": "upper"}).itertuples(index=False)
        }
        loo = loo or {}
        return cls(replicate, approach, estimates, loo.get("looic"), loo.get("looic_se"), loo.get("max_pareto_k"))


def bias_cp_table(results: Iterable[ReplicationResult], truth: dict[str, float]) -> pd.DataFrame:
    """Bias of posterior means and 95% interval coverage per approach and parameter."""
    results = list(results)
    if not results:
        raise ValueError("bias_cp_table needs at least one replicate")
    rows = []
    for approach in sorted({r.approach for r in results}):
        group = [r for r in results if r.approach == approach]
        for name, true_value in truth.items():
            missing = [r.replicate for r in group if name not in r.estimates]
            if missing:
                raise ValueError(f"parameter {name!r} missing from {approach} replicates {missing[:5]}")
            means = np.array([r.estimates[name][0] for r in group])
            covered = np.array([r.estimates[name][1] <= true_value <= r.estimates[name][2] for r in group])
            rows.append({
                "approach": approach,
                "parameter": name,
                "truth": true_value,
                "bias": float(np.mean(means - true_value)),
                "cp": float(100.0 * covered.mean()),
                "replicates": len(group),
            })
    return pd.DataFrame(rows)


def bias_cp_wide(table: pd.DataFrame) -> pd.DataFrame:
    """One row per parameter, bias/CP/replicate-count columns per approach."""
    wide = table.pivot(index="parameter", columns="approach", values=["bias", "cp", "replicates"])
    wide.columns = [f"{stat}_{approach}" for stat, approach in wide.columns]
    return wide.reset_index()


def looic_long_table(results: Iterable[ReplicationResult]) -> pd.DataFrame:
    return pd.DataFrame([
        {"replicate": r.replicate, "approach": r.approach, "looic": r.looic, "se": r.looic_se, "max_k": r.max_k}
        for r in results if r.looic is not None
    ])
