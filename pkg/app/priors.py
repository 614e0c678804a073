"""Prior log-densities on natural and log-transformed scales.

The ``*_log`` helpers take the unconstrained coordinate u = log(x) and
include the Jacobian term u, returning (log density, d/du).
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

LOG_2PI = np.log(2.0 * np.pi)


def normal_logpdf(x, mean=0.0, sd=1.0) -> float:
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    return float(np.sum(-0.5 * z ** 2 - np.log(sd) - 0.5 * LOG_2PI))


def normal_grad(x, mean=0.0, sd=1.0) -> np.ndarray:
    return -(np.asarray(x, dtype=float) - mean) / sd ** 2


def inv_gamma_logpdf(v, shape: float, scale: float) -> float:
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        return -np.inf
    return float(np.sum(shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(v) - scale / v))


def inv_gamma_log(u, shape: float, scale: float) -> tuple[float, np.ndarray]:
    """Inverse-gamma on v = exp(u), plus Jacobian."""
    u = np.asarray(u, dtype=float)
    inv = np.exp(-u)
    lp = np.sum(shape * np.log(scale) - gammaln(shape) - shape * u - scale * inv)
    return float(lp), -shape + scale * inv


def gamma_logpdf(x, shape: float, rate: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x))


def gamma_log(u, shape: float, rate: float) -> tuple[float, np.ndarray]:
    u = np.asarray(u, dtype=float)
    x = np.exp(u)
    lp = np.sum(shape * np.log(rate) - gammaln(shape) + shape * u - rate * x)
    return float(lp), shape - rate * x


def half_normal_logpdf(x, sd: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(0.5 * np.log(2.0 / np.pi) - np.log(sd) - 0.5 * (x / sd) ** 2))


def half_normal_log(u, sd: float) -> tuple[float, np.ndarray]:
    u = np.asarray(u, dtype=float)
    x2 = np.exp(2.0 * u) / sd ** 2
    lp = np.sum(0.5 * np.log(2.0 / np.pi) - np.log(sd) - 0.5 * x2 + u)
    return float(lp), 1.0 - x2


def half_cauchy_logpdf(x, scale: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(np.log(2.0 / (np.pi * scale)) - np.log1p((x / scale) ** 2)))


def half_cauchy_log(u, scale: float) -> tuple[float, np.ndarray]:
    u = np.asarray(u, dtype=float)
    r2 = np.exp(2.0 * u) / scale ** 2
    lp = np.sum(np.log(2.0 / (np.pi * scale)) - np.log1p(r2) + u)
    return float(lp), 1.0 - 2.0 * r2 / (1.0 + r2)


def structured_normal_logpdf(beta, precision: float, penalty: np.ndarray, logdet_penalty: float | None = None) -> float:
    """N(0, (precision · penalty)^-1) for a positive definite penalty."""
    beta = np.asarray(beta, dtype=float)
    m = len(beta)
    if logdet_penalty is None:
        logdet_penalty = np.linalg.slogdet(penalty)[1]
    return float(0.5 * (m * np.log(precision) + logdet_penalty) - 0.5 * m * LOG_2PI
                 - 0.5 * precision * beta @ penalty @ beta)
