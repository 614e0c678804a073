"""Convergence diagnostics: rank-normalized split R-hat, bulk ESS, MCSE.

Inputs are arrays shaped (chains, draws); the estimators are arviz's.
Constant draws have no defined R-hat or ESS; both come back NaN and are
never flagged.
"""

from __future__ import annotations

import logging

import arviz as az
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.01


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected (chains, draws), got shape {x.shape}")
    if x.shape[1] < 4:
        raise ValueError(f"need at least 4 draws per chain, got {x.shape[1]}")
    return x


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def rhat(x) -> float:
    """max(bulk, tail) rank-normalized split R-hat."""
    x = _as_chains(x)
    if _is_constant(x):
        return np.nan
    return float(az.rhat(x, method="rank"))


def ess_bulk(x) -> float:
    x = _as_chains(x)
    if _is_constant(x):
        return np.nan
    return float(az.ess(x, method="bulk"))


def ess_mean(x) -> float:
    x = _as_chains(x)
    if _is_constant(x):
        return np.nan
    return float(az.ess(x, method="mean"))


def mcse_mean(x) -> float:
    x = _as_chains(x)
    if _is_constant(x):
        return 0.0
    return float(az.mcse(x, method="mean"))


def summarize(draws: np.ndarray, names: list[str]) -> pd.DataFrame:
    """Posterior summary table from draws shaped (chains, draws, params)."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 3 or draws.shape[2] != len(names):
        raise ValueError(f"draws shape {draws.shape} does not match {len(names)} names")
    rows = []
    for j, name in enumerate(names):
        x = draws[:, :, j]
        rows.append({
            "parameter": name,
            "mean": float(x.mean()),
            "sd": float(x.std(ddof=1)),
            "q2.5": float(np.quantile(x, 0.025)),
            "q97.5": float(np.quantile(x, 0.975)),
            "rhat": rhat(x),
            "ess_bulk": ess_bulk(x),
            "mcse_mean": mcse_mean(x),
        })
    return pd.DataFrame(rows)


def flag_rhat(summary: pd.DataFrame, prefixes: tuple[str, ...], threshold: float = RHAT_THRESHOLD) -> list[str]:
    """Parameters whose name starts with one of prefixes and whose R-hat exceeds threshold."""
    mask = summary["parameter"].str.startswith(prefixes) & (summary["rhat"] > threshold)
    flagged = summary.loc[mask, "parameter"].tolist()
    if flagged:
        logger.warning(f"R-hat above {threshold} for {', '.join(flagged)}")
    return flagged
