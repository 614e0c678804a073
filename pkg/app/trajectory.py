"""Subject trajectories μ_i(t), their curvature, and the curvature-based WIV.

Every representation is written as

    μ_i(t) = [β0 + β1 t] + scale_i · A(t)ᵀa + [b_i0 + b_i1 t] + S(t)ᵀc_i

where A is the population spline family, S the subject family, and the
bracketed linear parts and scale_i are present only for some variants.
Curvature only sees the A and S terms, so cumulative WIV is the quadratic
form  scale² aᵀG_AA a + 2 scale aᵀG_AS c + cᵀG_SS c  in exact Gram blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import sparse

from app.splines import KnotConfig, OrthoBasis, SplineFamily, curvature_blocks

logger = logging.getLogger(__name__)

Variant = Literal["rspline", "pspline", "fpca", "smre"]


class WivSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["current", "cumulative", "windowed"] = "current"
    window: float = Field(1.0, gt=0)
    t0: float = 0.0

    @field_validator("t0")
    @classmethod
    def _origin_fixed(cls, v: float) -> float:
        if v != 0.0:
            raise ValueError("t0 is fixed at 0")
        return v


@dataclass
class PointSet:
    """Parameter-free design at a set of (subject, time) points."""

    subject: np.ndarray
    time: np.ndarray
    incidence: sparse.csr_matrix
    a: np.ndarray
    s: np.ndarray | None
    a_dd: np.ndarray | None = None
    s_dd: np.ndarray | None = None
    g_aa: np.ndarray | None = None
    g_as: np.ndarray | None = None
    g_ss: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.time)


@dataclass
class WivTerms:
    value: np.ndarray
    sign: np.ndarray | None = None       # current: sign of μ''
    curv_a: np.ndarray | None = None     # current: A''a
    gaa_a: np.ndarray | None = None      # cumulative pieces
    gas_c: np.ndarray | None = None
    gas_t_a: np.ndarray | None = None
    gss_c: np.ndarray | None = None
    qa: np.ndarray | None = None
    qas: np.ndarray | None = None


class TrajectoryModel:
    def __init__(
        self,
        variant: Variant,
        pop_family: SplineFamily,
        subj_family: SplineFamily | None,
        pop_names: list[str],
        subj_names: list[str],
        pop_linear: bool = False,
        subj_linear: bool = False,
        subject_scale: bool = False,
        basis: object | None = None,
    ):
        self.variant = variant
        self.pop_family = pop_family
        self.subj_family = subj_family
        self.pop_names = pop_names
        self.subj_names = subj_names
        self.pop_linear = pop_linear
        self.subj_linear = subj_linear
        self.subject_scale = subject_scale
        self.basis = basis

    # ── Constructors ──

    @classmethod
    def rspline(cls, cfg: KnotConfig) -> "TrajectoryModel":
        fam = SplineFamily.raw(cfg)
        k = cfg.n_basis
        return cls("rspline", fam, fam, [f"beta[{j + 1}]" for j in range(k)], [f"b[{j + 1}]" for j in range(k)], basis=cfg)

    @classmethod
    def pspline(cls, mean_cfg: KnotConfig, ortho: OrthoBasis) -> "TrajectoryModel":
        k = ortho.retained_K
        return cls(
            "pspline",
            SplineFamily.raw(mean_cfg),
            ortho.family,
            [f"beta[{j + 1}]" for j in range(mean_cfg.n_basis)],
            ["b0", "b1"] + [f"zeta[{j + 1}]" for j in range(k)],
            subj_linear=True,
            basis=ortho,
        )

    @classmethod
    def fpca(cls, mean_cfg: KnotConfig, eigen_family: SplineFamily, eigen: object | None = None) -> "TrajectoryModel":
        n_comp = eigen_family.size
        return cls(
            "fpca",
            SplineFamily.raw(mean_cfg),
            eigen_family,
            [f"beta[{j + 1}]" for j in range(mean_cfg.n_basis)],
            [f"zeta[{j + 1}]" for j in range(n_comp)],
            basis=eigen,
        )

    @classmethod
    def smre(cls, mean_cfg: KnotConfig) -> "TrajectoryModel":
        return cls(
            "smre",
            SplineFamily.raw(mean_cfg),
            None,
            ["beta0", "beta1"] + [f"beta[{j + 1}]" for j in range(mean_cfg.n_basis)],
            ["b0", "b1", "b2"],
            pop_linear=True,
            subj_linear=True,
            subject_scale=True,
            basis=mean_cfg,
        )

    # ── Layout ──

    @property
    def n_pop(self) -> int:
        return len(self.pop_names)

    @property
    def n_subj(self) -> int:
        return len(self.subj_names)

    @property
    def t_max(self) -> float:
        hi = self.pop_family.cfg.boundary[1]
        if self.subj_family is not None:
            hi = min(hi, self.subj_family.cfg.boundary[1])
        return hi

    def _check(self, pop: np.ndarray, subj: np.ndarray):
        if pop.shape[-1] != self.n_pop or subj.shape[-1] != self.n_subj:
            raise ValueError(
                f"{self.variant} expects {self.n_pop} population and {self.n_subj} subject coefficients, "
                f"got {pop.shape[-1]} and {subj.shape[-1]}"
            )

    def _split_pop(self, pop: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
        if self.pop_linear:
            return pop[:2], pop[2:]
        return None, pop

    def _split_subj(self, subj: np.ndarray):
        lin = subj[:, :2] if self.subj_linear else None
        scale = subj[:, 2] if self.subject_scale else None
        if self.subj_family is None:
            c = None
        else:
            c = subj[:, 2:] if self.subj_linear else subj
        return lin, scale, c

    # ── Design at points ──

    def points(self, subject: np.ndarray, time: np.ndarray, n_subjects: int, wiv: WivSpec | None = None) -> PointSet:
        subject = np.asarray(subject, dtype=int)
        time = np.asarray(time, dtype=float)
        incidence = sparse.csr_matrix(
            (np.ones(len(time)), (subject, np.arange(len(time)))), shape=(n_subjects, len(time))
        )
        s_fam = self.subj_family
        pts = PointSet(
            subject=subject,
            time=time,
            incidence=incidence,
            a=self.pop_family.values(time),
            s=s_fam.values(time) if s_fam is not None else None,
        )
        if wiv is None:
            return pts
        if wiv.kind == "current":
            pts.a_dd = self.pop_family.values(time, 2)
            pts.s_dd = s_fam.values(time, 2) if s_fam is not None else None
            return pts

        width = wiv.window if wiv.kind == "windowed" else None
        blocks = curvature_blocks(self.pop_family, s_fam, time, self.t_max, width)
        pts.g_aa = blocks.block_pop
        if s_fam is not None:
            pts.g_as = blocks.block_cross
            pts.g_ss = blocks.block_subj
        return pts

    # ── Vectorized evaluation ──

    def mu(self, pts: PointSet, pop: np.ndarray, subj: np.ndarray) -> np.ndarray:
        lin_p, a = self._split_pop(pop)
        lin_s, scale, c = self._split_subj(subj)
        out = pts.a @ a
        if scale is not None:
            out = out * scale[pts.subject]
        if lin_p is not None:
            out = out + lin_p[0] + lin_p[1] * pts.time
        if lin_s is not None:
            out = out + lin_s[pts.subject, 0] + lin_s[pts.subject, 1] * pts.time
        if c is not None:
            out = out + np.einsum("pk,pk->p", pts.s, c[pts.subject])
        return out

    def mu_dd_points(self, pts: PointSet, pop: np.ndarray, subj: np.ndarray) -> np.ndarray:
        _, a = self._split_pop(pop)
        _, scale, c = self._split_subj(subj)
        out = pts.a_dd @ a
        if scale is not None:
            out = out * scale[pts.subject]
        if c is not None:
            out = out + np.einsum("pk,pk->p", pts.s_dd, c[pts.subject])
        return out

    def wiv(self, pts: PointSet, pop: np.ndarray, subj: np.ndarray, spec: WivSpec) -> WivTerms:
        if spec.kind == "current":
            d = self.mu_dd_points(pts, pop, subj)
            _, a = self._split_pop(pop)
            return WivTerms(value=np.abs(d), sign=np.sign(d), curv_a=pts.a_dd @ a)

        _, a = self._split_pop(pop)
        _, scale, c = self._split_subj(subj)
        sc = scale[pts.subject] if scale is not None else np.ones(len(pts))
        gaa_a = np.einsum("pij,j->pi", pts.g_aa, a)
        qa = gaa_a @ a
        q = sc ** 2 * qa
        terms = WivTerms(value=np.empty(0), gaa_a=gaa_a, qa=qa)
        if c is not None:
            cp = c[pts.subject]
            gas_c = np.einsum("pij,pj->pi", pts.g_as, cp)
            gss_c = np.einsum("pij,pj->pi", pts.g_ss, cp)
            qas = gas_c @ a
            q = q + 2.0 * sc * qas + np.einsum("pk,pk->p", gss_c, cp)
            terms.gas_c, terms.gss_c, terms.qas = gas_c, gss_c, qas
            terms.gas_t_a = np.einsum("pij,i->pj", pts.g_as, a)
        terms.value = np.sqrt(np.maximum(q, 0.0))
        return terms

    def backprop(
        self,
        pts: PointSet,
        pop: np.ndarray,
        subj: np.ndarray,
        g_mu: np.ndarray | None,
        g_wiv: np.ndarray | None = None,
        spec: WivSpec | None = None,
        terms: WivTerms | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pull per-point gradients of μ and WIV back to (pop, subj)."""
        lin_p, a = self._split_pop(pop)
        lin_s, scale, c = self._split_subj(subj)
        inc = pts.incidence
        sc = scale[pts.subject] if scale is not None else None
        g_a = np.zeros_like(a)
        g_scale = np.zeros(subj.shape[0]) if scale is not None else None
        g_c = np.zeros_like(c) if c is not None else None
        g_lin_p = np.zeros(2) if lin_p is not None else None
        g_lin_s = np.zeros((subj.shape[0], 2)) if lin_s is not None else None

        if g_mu is not None:
            g_a += pts.a.T @ (g_mu * sc if sc is not None else g_mu)
            if g_scale is not None:
                g_scale += inc @ (g_mu * (pts.a @ a))
            if g_lin_p is not None:
                g_lin_p += [g_mu.sum(), g_mu @ pts.time]
            if g_lin_s is not None:
                g_lin_s[:, 0] += inc @ g_mu
                g_lin_s[:, 1] += inc @ (g_mu * pts.time)
            if g_c is not None:
                g_c += inc @ (g_mu[:, None] * pts.s)

        if g_wiv is not None:
            if terms is None:
                terms = self.wiv(pts, pop, subj, spec)
            if spec.kind == "current":
                gd = g_wiv * terms.sign
                g_a += pts.a_dd.T @ (gd * sc if sc is not None else gd)
                if g_scale is not None:
                    g_scale += inc @ (gd * terms.curv_a)
                if g_c is not None:
                    g_c += inc @ (gd[:, None] * pts.s_dd)
            else:
                safe = terms.value > 0
                f = np.where(safe, g_wiv / np.where(safe, 2.0 * terms.value, 1.0), 0.0)
                s1 = sc if sc is not None else np.ones(len(pts))
                dq_a = 2.0 * (s1 ** 2)[:, None] * terms.gaa_a
                if terms.gas_c is not None:
                    dq_a = dq_a + 2.0 * s1[:, None] * terms.gas_c
                g_a += dq_a.T @ f
                if g_c is not None:
                    dq_c = 2.0 * s1[:, None] * terms.gas_t_a + 2.0 * terms.gss_c
                    g_c += inc @ (f[:, None] * dq_c)
                if g_scale is not None:
                    dq_s = 2.0 * s1 * terms.qa
                    if terms.qas is not None:
                        dq_s = dq_s + 2.0 * terms.qas
                    g_scale += inc @ (f * dq_s)

        g_pop = g_a if g_lin_p is None else np.concatenate([g_lin_p, g_a])
        parts = []
        if g_lin_s is not None:
            parts.append(g_lin_s)
        if g_scale is not None:
            parts.append(g_scale[:, None])
        if g_c is not None:
            parts.append(g_c)
        g_subj = np.concatenate(parts, axis=1)
        return g_pop, g_subj


# ── Scalar API ──────────────────────────────────────────────────────

def _single(model: TrajectoryModel, pop, subj, t: float, wiv: WivSpec | None = None):
    pop = np.asarray(pop, dtype=float)
    subj = np.atleast_2d(np.asarray(subj, dtype=float))
    model._check(pop, subj)
    pts = model.points(np.zeros(1, dtype=int), np.array([float(t)]), 1, wiv)
    return pts, pop, subj


def eval_mu(model: TrajectoryModel, pop, subj, t: float) -> float:
    pts, pop, subj = _single(model, pop, subj, t)
    return float(model.mu(pts, pop, subj)[0])


def eval_mu_dd(model: TrajectoryModel, pop, subj, t: float) -> float:
    pts, pop, subj = _single(model, pop, subj, t, WivSpec(kind="current"))
    return float(model.mu_dd_points(pts, pop, subj)[0])


def eval_wiv(model: TrajectoryModel, pop, subj, spec: WivSpec, t: float) -> float:
    if t < 0:
        raise ValueError(f"WIV is defined for t >= 0, got {t}")
    pts, pop, subj = _single(model, pop, subj, t, spec)
    return float(model.wiv(pts, pop, subj, spec).value[0])


def export_trajectories(
    model: TrajectoryModel,
    pop: np.ndarray,
    subj: np.ndarray,
    subject_ids: np.ndarray,
    grid: np.ndarray,
    spec: WivSpec,
) -> pd.DataFrame:
    """Long table of (subject, time, mu, mu_dd, wiv) for plotting."""
    n = subj.shape[0]
    subject = np.repeat(np.arange(n), len(grid))
    time = np.tile(np.asarray(grid, dtype=float), n)
    pts = model.points(subject, time, n, spec)
    if spec.kind != "current":
        cur = model.points(subject, time, n, WivSpec(kind="current"))
        pts.a_dd, pts.s_dd = cur.a_dd, cur.s_dd
    return pd.DataFrame({
        "subject": np.asarray(subject_ids)[subject],
        "time": time,
        "mu": model.mu(pts, pop, subj),
        "mu_dd": model.mu_dd_points(pts, pop, subj),
        "wiv": model.wiv(pts, pop, subj, spec).value,
    })
