"""Preliminary FPCA step: mean, smoothed covariance, eigenfunctions.

Runs once before joint fitting. The eigenfunctions it returns are fixed
inside the sampler; only their scores and score variances are sampled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from app.errors import DataError, NumericError
from app.splines import (
    KnotConfig,
    SplineFamily,
    design_matrix,
    difference_matrix,
    penalized_fit_gcv,
    retained_count,
)

logger = logging.getLogger(__name__)

COV_GRID_SIZE = 51
MIN_MEAN_OBS = 10
MIN_MEAN_SUBJECTS = 2
_PAIR_CHUNK = 20000


@dataclass(frozen=True)
class CovarianceSurface:
    grid: np.ndarray
    values: np.ndarray
    smoothing_penalty: float


@dataclass(frozen=True)
class EigenSystem:
    grid: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    quadrature_weights: np.ndarray
    pve_achieved: float

    @property
    def L(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True)
class FpcaFit:
    mean_coeffs: np.ndarray
    mean_cfg: KnotConfig
    surface: CovarianceSurface
    eigen: EigenSystem
    family: SplineFamily


def _records(data: pd.DataFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        data["subject"].to_numpy(),
        data["time"].to_numpy(dtype=float),
        data["value"].to_numpy(dtype=float),
    )


def estimate_mean(data: pd.DataFrame, cfg: KnotConfig) -> np.ndarray:
    """Pooled P-spline fit of the mean curve, penalty chosen by GCV."""
    if len(data) == 0:
        raise DataError("cannot estimate a mean function from empty data")
    if len(data) < MIN_MEAN_OBS:
        raise DataError(f"{len(data)} observations are too few for a mean fit (needs >= {MIN_MEAN_OBS})")
    n_subjects = data["subject"].nunique()
    if n_subjects < MIN_MEAN_SUBJECTS:
        raise DataError(f"mean fit needs >= {MIN_MEAN_SUBJECTS} subjects, got {n_subjects}")
    _, t, y = _records(data)
    x = design_matrix(cfg, t)
    penalty = difference_matrix(2, cfg.n_basis).regularized()
    coef, lam, _ = penalized_fit_gcv(x, y, penalty)
    logger.debug(f"Mean fit: n_obs={len(y)}, lambda={lam:.3g}")
    return coef


def covariance_knots(grid: np.ndarray, n_interior: int = 9) -> KnotConfig:
    """Marginal basis whose interior knots sit on covariance grid points."""
    stride = max(1, (len(grid) - 1) // (n_interior + 1))
    interior = grid[stride:len(grid) - 1:stride]
    return KnotConfig(degree=3, interior_knots=tuple(float(k) for k in interior), boundary=(float(grid[0]), float(grid[-1])))


def _cross_product_pairs(subject: np.ndarray, t: np.ndarray, y: np.ndarray):
    s_list, t_list, v_list = [], [], []
    order = np.argsort(subject, kind="stable")
    subject, t, y = subject[order], t[order], y[order]
    bounds = np.flatnonzero(np.r_[True, subject[1:] != subject[:-1], True])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi - lo < 2:
            continue
        j, k = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi), indexing="ij")
        off = j != k
        s_list.append(t[j[off]])
        t_list.append(t[k[off]])
        v_list.append(y[j[off]] * y[k[off]])
    if not s_list:
        raise DataError("covariance smoothing needs at least one subject with >= 2 observations")
    return np.concatenate(s_list), np.concatenate(t_list), np.concatenate(v_list)


def smooth_covariance(centered: pd.DataFrame, grid: np.ndarray, cfg: KnotConfig | None = None) -> CovarianceSurface:
    """Tensor-product P-spline smooth of off-diagonal raw cross-products."""
    grid = np.asarray(grid, dtype=float)
    subject, t, y = _records(centered)
    s_pts, t_pts, v = _cross_product_pairs(subject, t, y)
    cfg = cfg or covariance_knots(grid)
    nb = cfg.n_basis

    xtx = np.zeros((nb * nb, nb * nb))
    xty = np.zeros(nb * nb)
    for start in range(0, len(v), _PAIR_CHUNK):
        sl = slice(start, start + _PAIR_CHUNK)
        bs = design_matrix(cfg, s_pts[sl])
        bt = design_matrix(cfg, t_pts[sl])
        x = (bs[:, :, None] * bt[:, None, :]).reshape(len(bs), nb * nb)
        xtx += x.T @ x
        xty += x.T @ v[sl]

    p = difference_matrix(2, nb).regularized()
    eye = np.eye(nb)
    penalty = np.kron(p, eye) + np.kron(eye, p)
    coef, lam, _ = penalized_fit_gcv(
        None, None, penalty, lambdas=np.logspace(-4, 6, 31),
        xtx=xtx, xty=xty, yty=float(v @ v), n_obs=len(v),
    )
    g = coef.reshape(nb, nb)
    g = 0.5 * (g + g.T)
    bg = design_matrix(cfg, grid)
    values = bg @ g @ bg.T
    values = 0.5 * (values + values.T)
    logger.info(f"Covariance smoothed from {len(v)} cross-products (lambda={lam:.3g})")
    return CovarianceSurface(grid=grid, values=values, smoothing_penalty=lam)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    d = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def eigendecompose(surface: CovarianceSurface, pve: float = 0.999) -> EigenSystem:
    if not 0 < pve <= 1:
        raise ValueError(f"pve must be in (0, 1], got {pve}")
    values = surface.values
    if not np.all(np.isfinite(values)):
        raise NumericError("covariance surface has non-finite entries")
    w = trapezoid_weights(surface.grid)
    sw = np.sqrt(w)
    lam, u = np.linalg.eigh(sw[:, None] * values * sw[None, :])
    order = np.argsort(lam)[::-1]
    lam, u = lam[order], u[:, order]
    positive = lam > 1e-12 * max(lam[0], 0.0)
    if not np.any(positive):
        raise NumericError("covariance surface has no positive eigenvalues")
    lam, u = lam[positive], u[:, positive]
    n_keep = retained_count(lam, pve)
    psi = u[:, :n_keep] / sw[:, None]
    flip = (w @ psi) < 0
    psi[:, flip] *= -1.0
    achieved = float(lam[:n_keep].sum() / lam.sum())
    return EigenSystem(
        grid=surface.grid,
        eigenfunctions=psi,
        eigenvalues=lam[:n_keep],
        quadrature_weights=w,
        pve_achieved=achieved,
    )


def eigen_family(eigen: EigenSystem, cfg: KnotConfig) -> SplineFamily:
    """Re-expand tabulated eigenfunctions on a cubic basis for differentiation."""
    b = design_matrix(cfg, eigen.grid)
    coeffs = np.linalg.lstsq(b, eigen.eigenfunctions, rcond=None)[0]
    return SplineFamily(cfg, coeffs)


def fit_fpca(data: pd.DataFrame, mean_cfg: KnotConfig, grid_size: int = COV_GRID_SIZE, pve: float = 0.999) -> FpcaFit:
    mean_coeffs = estimate_mean(data, mean_cfg)
    _, t, y = _records(data)
    centered = data.assign(value=y - design_matrix(mean_cfg, t) @ mean_coeffs)
    grid = np.linspace(mean_cfg.boundary[0], mean_cfg.boundary[1], grid_size)
    cov_cfg = covariance_knots(grid)
    surface = smooth_covariance(centered, grid, cov_cfg)
    eigen = eigendecompose(surface, pve)
    logger.info(f"FPCA: L={eigen.L} components explain {eigen.pve_achieved:.4f} of the positive spectrum")
    return FpcaFit(
        mean_coeffs=mean_coeffs,
        mean_cfg=mean_cfg,
        surface=surface,
        eigen=eigen,
        family=eigen_family(eigen, cov_cfg),
    )
