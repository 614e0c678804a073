"""Cubic B-spline machinery shared by every trajectory representation.

Evaluation goes through scipy's BSpline with an identity coefficient matrix,
so each column is one basis function. Curvature Gram matrices
∫_0^t A''(s) B''(s)^T ds are integrated exactly: second derivatives of cubic
splines are piecewise linear, their products piecewise quadratic, and
Simpson's rule on every interval between consecutive knots is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.integrate import cumulative_simpson
from scipy.interpolate import BSpline

from app.cache import array_digest, gram_cache
from app.errors import DataError, DomainError, NumericError

logger = logging.getLogger(__name__)

BOUNDARY_PAD = 1e-6        # relative padding of the data range
PINV_REL_TOL = 1e-10       # pseudo-inverse cutoff relative to the largest eigenvalue
DEFAULT_RIDGE = 1e-6


class KnotConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    degree: int = 3
    interior_knots: tuple[float, ...] = ()
    boundary: tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _check(self) -> "KnotConfig":
        lo, hi = self.boundary
        if not hi > lo:
            raise ValueError(f"boundary must satisfy lo < hi, got {self.boundary}")
        knots = np.asarray(self.interior_knots, dtype=float)
        if knots.size:
            if np.any(np.diff(knots) <= 0):
                raise ValueError("interior knots must be strictly increasing")
            if knots[0] <= lo or knots[-1] >= hi:
                raise ValueError("interior knots must lie strictly inside the boundary")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        return self

    @property
    def n_basis(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        p = self.degree
        return np.concatenate([[lo] * (p + 1), self.interior_knots, [hi] * (p + 1)]).astype(float)

    @property
    def greville(self) -> np.ndarray:
        """Knot averages g_j with sum_j g_j B_j(t) = t."""
        t = self.knot_vector
        p = self.degree
        return np.array([t[j + 1:j + p + 1].mean() for j in range(self.n_basis)])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knot_vector)

    @classmethod
    def equally_spaced(cls, lo: float, hi: float, n_basis: int, degree: int = 3, pad: bool = True) -> "KnotConfig":
        """n_basis functions with interior knots equally spaced on [lo, hi]."""
        n_interior = n_basis - degree - 1
        if n_interior < 0:
            raise ValueError(f"n_basis={n_basis} too small for degree {degree}")
        interior = lo + (hi - lo) * np.arange(1, n_interior + 1) / (n_interior + 1)
        return cls.with_knots(lo, hi, interior, degree=degree, pad=pad)

    @classmethod
    def with_knots(cls, lo: float, hi: float, interior: Sequence[float], degree: int = 3, pad: bool = True) -> "KnotConfig":
        lo_b, hi_b = padded_range(lo, hi) if pad else (float(lo), float(hi))
        return cls(degree=degree, interior_knots=tuple(float(k) for k in interior), boundary=(lo_b, hi_b))


def padded_range(lo: float, hi: float) -> tuple[float, float]:
    pad = BOUNDARY_PAD * max(hi - lo, 1.0)
    return float(lo - pad), float(hi + pad)


@lru_cache(maxsize=256)
def _basis_spline(degree: int, interior: tuple[float, ...], boundary: tuple[float, float]) -> BSpline:
    cfg = KnotConfig(degree=degree, interior_knots=interior, boundary=boundary)
    return BSpline(cfg.knot_vector, np.eye(cfg.n_basis), degree, extrapolate=True)


def design_matrix(cfg: KnotConfig, t, deriv: int = 0) -> np.ndarray:
    """Basis values (or derivatives) at each t; shape (len(t), n_basis)."""
    if deriv < 0 or deriv > cfg.degree:
        raise ValueError(f"deriv={deriv} must be in [0, {cfg.degree}]")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = cfg.boundary
    if t.size and (np.any(t < lo) or np.any(t > hi) or not np.all(np.isfinite(t))):
        bad = t[(t < lo) | (t > hi) | ~np.isfinite(t)]
        raise DomainError(f"t={bad[0]!r} outside basis boundary [{lo}, {hi}]")
    spl = _basis_spline(cfg.degree, cfg.interior_knots, cfg.boundary)
    return spl(t, nu=deriv)


def eval_basis(cfg: KnotConfig, t: float, deriv: int = 0) -> np.ndarray:
    return design_matrix(cfg, [t], deriv)[0]


# ── Penalties ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class PenaltyMatrix:
    order: int
    dim: int
    difference: np.ndarray
    matrix: np.ndarray
    ridge: float = DEFAULT_RIDGE

    def regularized(self) -> np.ndarray:
        return self.matrix + self.ridge * np.eye(self.dim)


def difference_matrix(order: int, dim: int, ridge: float = DEFAULT_RIDGE) -> PenaltyMatrix:
    if dim <= order:
        raise ValueError(f"difference matrix needs dim > order, got dim={dim}, order={order}")
    d = np.diff(np.eye(dim), n=order, axis=0)
    return PenaltyMatrix(order=order, dim=dim, difference=d, matrix=d.T @ d, ridge=ridge)


def pseudo_inverse_factor(matrix: np.ndarray, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    """L with L @ L.T equal to the pseudo-inverse of a symmetric PSD matrix."""
    w, v = np.linalg.eigh(matrix)
    keep = w > rel_tol * w.max()
    return v[:, keep] / np.sqrt(w[keep])


def penalized_fit_gcv(
    x: np.ndarray,
    y: np.ndarray,
    penalty: np.ndarray,
    lambdas: np.ndarray | None = None,
    xtx: np.ndarray | None = None,
    xty: np.ndarray | None = None,
    yty: float | None = None,
    n_obs: int | None = None,
) -> tuple[np.ndarray, float, float]:
    """Penalized least squares with the penalty weight chosen by GCV.

    Accepts precomputed cross-products so very tall designs can be
    accumulated in chunks. Returns (coefficients, lambda, gcv score).
    """
    if xtx is None:
        xtx, xty, yty, n_obs = x.T @ x, x.T @ y, float(y @ y), len(y)
    if lambdas is None:
        lambdas = np.logspace(-6, 6, 49)
    best = (None, np.nan, np.inf)
    for lam in lambdas:
        lhs = xtx + lam * penalty
        try:
            coef = np.linalg.solve(lhs, xty)
            edf = float(np.trace(np.linalg.solve(lhs, xtx)))
        except np.linalg.LinAlgError:
            continue
        rss = yty - 2.0 * coef @ xty + coef @ xtx @ coef
        denom = (n_obs - edf) ** 2
        if denom <= 0:
            continue
        gcv = n_obs * max(rss, 0.0) / denom
        if gcv < best[2]:
            best = (coef, float(lam), float(gcv))
    if best[0] is None:
        raise NumericError("penalized fit failed for every smoothing parameter")
    return best


# ── Spline families and curvature Grams ─────────────────────────────

@dataclass(frozen=True)
class SplineFamily:
    """Functions f_j(t) = sum_k B_k(t) coeffs[k, j] on one knot configuration."""

    cfg: KnotConfig
    coeffs: np.ndarray

    @classmethod
    def raw(cls, cfg: KnotConfig) -> "SplineFamily":
        return cls(cfg, np.eye(cfg.n_basis))

    @property
    def size(self) -> int:
        return self.coeffs.shape[1]

    def values(self, t, deriv: int = 0) -> np.ndarray:
        return design_matrix(self.cfg, t, deriv) @ self.coeffs

    def digest(self) -> str:
        return array_digest(self.cfg.knot_vector, self.coeffs, tag=f"deg{self.cfg.degree}")


@dataclass(frozen=True)
class FunctionTable:
    """Second derivatives tabulated on a grid (no spline representation)."""

    grid: np.ndarray
    dd: np.ndarray

    @property
    def size(self) -> int:
        return self.dd.shape[1]


@dataclass(frozen=True)
class CurvatureGram:
    t: np.ndarray
    block_pop: np.ndarray
    block_cross: np.ndarray
    block_subj: np.ndarray


class CurvatureTable:
    """Exact cumulative curvature Gram of two spline families, anchored at 0."""

    def __init__(self, fam_a: SplineFamily, fam_b: SplineFamily, t_max: float):
        lo = max(fam_a.cfg.boundary[0], fam_b.cfg.boundary[0])
        hi = min(fam_a.cfg.boundary[1], fam_b.cfg.boundary[1])
        if lo > 0 or t_max > hi:
            raise DomainError(f"families cover [{lo}, {hi}], need [0, {t_max}]")
        bps = np.concatenate([fam_a.cfg.breakpoints, fam_b.cfg.breakpoints, [0.0, t_max]])
        bps = np.unique(bps[(bps >= 0.0) & (bps <= t_max)])
        self.fam_a = fam_a
        self.fam_b = fam_b
        self.t_max = float(t_max)
        self.breakpoints = bps
        cum = np.zeros((len(bps), fam_a.size, fam_b.size))
        if len(bps) > 1:
            cum[1:] = np.cumsum(self._simpson(bps[:-1], bps[1:]), axis=0)
        self.cumulative = cum

    def _simpson(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mid = 0.5 * (a + b)
        fa = [self.fam_a.values(x, 2) for x in (a, mid, b)]
        fb = [self.fam_b.values(x, 2) for x in (a, mid, b)]
        total = (np.einsum("ni,nj->nij", fa[0], fb[0])
                 + 4.0 * np.einsum("ni,nj->nij", fa[1], fb[1])
                 + np.einsum("ni,nj->nij", fa[2], fb[2]))
        return ((b - a) / 6.0)[:, None, None] * total

    def at(self, ts) -> np.ndarray:
        """∫_0^t A''B''^T for every t; shape (len(ts), n_a, n_b)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if np.any(ts < 0) or np.any(ts > self.t_max):
            raise DomainError(f"curvature Gram requested outside [0, {self.t_max}]")
        if len(self.breakpoints) == 1:
            return np.zeros((len(ts), self.fam_a.size, self.fam_b.size))
        j = np.clip(np.searchsorted(self.breakpoints, ts, side="right") - 1, 0, len(self.breakpoints) - 2)
        return self.cumulative[j] + self._simpson(self.breakpoints[j], ts)

    def window(self, ts, width: float) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return self.at(ts) - self.at(np.maximum(0.0, ts - width))


def curvature_table(fam_a: SplineFamily, fam_b: SplineFamily, t_max: float) -> CurvatureTable:
    key = f"{fam_a.digest()}:{fam_b.digest()}:{float(t_max)!r}"
    return gram_cache.get_or_build(key, lambda: CurvatureTable(fam_a, fam_b, t_max))


def _tabulate(fam: SplineFamily | FunctionTable, grid: np.ndarray | None) -> FunctionTable:
    if isinstance(fam, FunctionTable):
        return fam
    return FunctionTable(grid, fam.values(grid, 2))


def curvature_gram(dd_a: SplineFamily | FunctionTable, dd_b: SplineFamily | FunctionTable, t: float) -> np.ndarray:
    """∫_0^t A''_l(s) B''_m(s) ds.

    Exact when both sides are spline families; composite Simpson on the
    shared grid when either side is only tabulated.
    """
    if isinstance(dd_a, SplineFamily) and isinstance(dd_b, SplineFamily):
        t_max = min(dd_a.cfg.boundary[1], dd_b.cfg.boundary[1])
        if t > t_max:
            raise DomainError(f"t={t} beyond t_max={t_max}")
        return curvature_table(dd_a, dd_b, t_max).at([t])[0]

    grid = dd_a.grid if isinstance(dd_a, FunctionTable) else dd_b.grid
    a = _tabulate(dd_a, grid)
    b = _tabulate(dd_b, grid)
    if not np.array_equal(a.grid, b.grid):
        raise ValueError("tabulated second derivatives must share one grid")
    if t < 0 or t > grid[-1] or grid[0] > 0:
        raise DomainError(f"t={t} outside tabulated range [0, {grid[-1]}]")
    prod = np.einsum("gi,gj->gij", a.dd, b.dd)
    cum = cumulative_simpson(prod, x=grid, axis=0, initial=0.0)
    flat = cum.reshape(len(grid), -1)
    at_t = np.array([np.interp(t, grid, col) for col in flat.T])
    at_0 = np.array([np.interp(0.0, grid, col) for col in flat.T])
    return (at_t - at_0).reshape(a.size, b.size)


def curvature_blocks(pop: SplineFamily, subj: SplineFamily | None, ts, t_max: float | None = None,
                     window: float | None = None) -> CurvatureGram:
    """Population, cross and subject curvature Grams at each t.

    Cumulative from 0, or over the trailing window when width is given.
    Blocks are stacked along the first axis, one slice per t.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if t_max is None:
        t_max = pop.cfg.boundary[1] if subj is None else min(pop.cfg.boundary[1], subj.cfg.boundary[1])

    def gram(fa: SplineFamily, fb: SplineFamily) -> np.ndarray:
        table = curvature_table(fa, fb, t_max)
        return table.at(ts) if window is None else table.window(ts, window)

    block_pop = gram(pop, pop)
    if subj is None:
        return CurvatureGram(ts, block_pop, np.zeros((len(ts), pop.size, 0)), np.zeros((len(ts), 0, 0)))
    return CurvatureGram(ts, block_pop, gram(pop, subj), gram(subj, subj))


# ── Orthogonalized P-spline basis ───────────────────────────────────

@dataclass(frozen=True)
class OrthoBasis:
    cfg: KnotConfig
    grid: np.ndarray
    null_design: np.ndarray
    penalized_functions: np.ndarray
    penalized_dd: np.ndarray
    retained_K: int
    eigenvalues: np.ndarray
    coeffs: np.ndarray = field(repr=False)
    total_spectrum: float = 0.0

    @property
    def family(self) -> SplineFamily:
        return SplineFamily(self.cfg, self.coeffs)

    @property
    def pve_achieved(self) -> float:
        return float(self.eigenvalues.sum() / self.total_spectrum)


def retained_count(eigenvalues: np.ndarray, pve: float) -> int:
    cum = np.cumsum(eigenvalues) / eigenvalues.sum()
    return int(min(np.searchsorted(cum, pve - 1e-12) + 1, len(eigenvalues)))


def build_ortho_basis(cfg: KnotConfig, grid_size: int = 401, pve: float = 0.999) -> OrthoBasis:
    """Decorrelated penalized complement of the RW2 null space.

    Eigendecomposition of B P^- B^T on an equally spaced grid, with the
    constant and linear content projected out. Each retained function is a
    cubic spline on the raw basis; the leading one has unit RMS on the grid
    and the rest scale with the square root of their eigenvalue.
    """
    k0 = cfg.n_basis
    if k0 < 10:
        raise ValueError(f"orthogonalized basis needs K0 >= 10, got {k0}")
    if grid_size < 10 * k0:
        raise ValueError(f"grid_size={grid_size} below 10*K0={10 * k0}")
    if not 0 < pve <= 1:
        raise ValueError(f"pve must be in (0, 1], got {pve}")

    grid = np.linspace(cfg.boundary[0], cfg.boundary[1], grid_size)
    b = design_matrix(cfg, grid)
    factor = pseudo_inverse_factor(difference_matrix(2, k0).matrix)
    null_design = np.column_stack([np.ones_like(grid), grid])

    a = b @ factor
    null_coef = np.linalg.lstsq(null_design, a, rcond=None)[0]
    try:
        u, s, wt = np.linalg.svd(a - null_design @ null_coef, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"spectral decomposition failed (cond(B)={np.linalg.cond(b):.3g}): {e}") from e

    eig = s ** 2
    positive = eig > PINV_REL_TOL * eig[0]
    eig = eig[positive]
    if eig.size == 0:
        raise NumericError(f"B P^- B^T has no positive spectrum (cond(B)={np.linalg.cond(b):.3g})")
    k = retained_count(eig, pve)

    # raw-basis coefficients: L w_k minus its constant/linear part (sum B_j = 1, sum g_j B_j = t)
    w = wt[:k].T
    lin = null_coef @ w
    theta = factor @ w - np.outer(np.ones(k0), lin[0]) - np.outer(cfg.greville, lin[1])
    theta *= np.sqrt(grid_size) / s[0]

    funcs = b @ theta
    dd = design_matrix(cfg, grid, 2) @ theta
    logger.info(f"Orthogonalized basis: K0={k0}, retained K={k} ({eig[:k].sum() / eig.sum():.5f} of spectrum)")
    return OrthoBasis(
        cfg=cfg,
        grid=grid,
        null_design=null_design,
        penalized_functions=funcs,
        penalized_dd=dd,
        retained_K=k,
        eigenvalues=eig[:k],
        coeffs=theta,
        total_spectrum=float(eig.sum()),
    )


# ── Knot rules ──────────────────────────────────────────────────────

def rspline_knots(times: np.ndarray, rule: str, lo: float, hi: float) -> KnotConfig:
    """R-spline knot placement: one midpoint knot, or 25/50/75% visit-time quantiles."""
    times = np.asarray(times, dtype=float)
    if rule != "midpoint" and times.size == 0:
        raise DataError(f"knot rule {rule!r} needs at least one visit time")
    if rule == "midpoint":
        interior = [0.5 * (lo + hi)]
    elif rule == "quantiles3":
        interior = np.unique(np.quantile(times, [0.25, 0.5, 0.75]))
        if interior.size < 3:
            logger.warning(f"Tied visit-time quartiles collapse to {interior.size} knot(s): {interior.tolist()}")
    elif rule == "median":
        interior = [float(np.median(times))]
    else:
        raise ValueError(f"unknown knot rule {rule!r}")
    return KnotConfig.with_knots(lo, hi, interior)
