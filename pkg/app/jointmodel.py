"""Joint longitudinal / time-to-event log posterior with exact gradients.

Longitudinal part: y_ij ~ N(w_Lᵀβ_L + μ_i(t_ij), σ_e²).
Survival part:     log h_i(t) = log h0(t) + w_Sᵀγ + α1 m_i(t) + α2 WIV_i(t),
with delayed entry handled by integrating the hazard over [entry, exit]
only. Cumulative hazards use Gauss–Legendre nodes fixed at construction;
all basis values and curvature Grams at those nodes are precomputed.

Subject-level effects are sampled non-centred (natural = scale · z); the
posterior equals likelihood + natural-scale prior + log Jacobian exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.polynomial.legendre import leggauss

from app.config import PriorConfig
from app.errors import DataError, DomainError, NumericError
from app.priors import (
    LOG_2PI,
    gamma_log,
    gamma_logpdf,
    half_cauchy_log,
    half_cauchy_logpdf,
    half_normal_log,
    half_normal_logpdf,
    inv_gamma_log,
    inv_gamma_logpdf,
    normal_grad,
    normal_logpdf,
    structured_normal_logpdf,
)
from app.splines import KnotConfig, design_matrix, difference_matrix, penalized_fit_gcv
from app.trajectory import PointSet, TrajectoryModel, WivSpec

logger = logging.getLogger(__name__)

LONGITUDINAL_COLUMNS = ("subject", "time", "value")
SURVIVAL_COLUMNS = ("subject", "entry", "exit", "event")
COVARIATE_PREFIX = "cov"
KEY_PARAMETERS = ("beta_L", "gamma", "alpha1", "alpha2", "sigma2_e")


# ── Data ────────────────────────────────────────────────────────────

@dataclass
class Dataset:
    subject_ids: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    w_surv: np.ndarray
    surv_names: list[str]
    w_long: np.ndarray
    long_names: list[str]
    obs_subject: np.ndarray
    obs_time: np.ndarray
    obs_value: np.ndarray

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def n_obs(self) -> int:
        return len(self.obs_time)

    @property
    def t_max(self) -> float:
        return float(max(self.exit.max(), self.obs_time.max()))

    @classmethod
    def from_frames(
        cls,
        longitudinal: pd.DataFrame,
        survival: pd.DataFrame,
        long_covs: list[str] | None = None,
        surv_covs: list[str] | None = None,
    ) -> "Dataset":
        for name, frame, cols in (("longitudinal", longitudinal, LONGITUDINAL_COLUMNS),
                                  ("survival", survival, SURVIVAL_COLUMNS)):
            missing = [c for c in cols if c not in frame.columns]
            if missing:
                raise DataError(f"{name} data missing columns {missing}")
        if long_covs is None:
            long_covs = [c for c in longitudinal.columns if str(c).startswith(COVARIATE_PREFIX)]
        if surv_covs is None:
            surv_covs = [c for c in survival.columns if str(c).startswith(COVARIATE_PREFIX)]
        for c in long_covs:
            if c not in longitudinal.columns:
                raise DataError(f"longitudinal covariate {c!r} not found")
        for c in surv_covs:
            if c not in survival.columns:
                raise DataError(f"survival covariate {c!r} not found")

        surv = survival.sort_values("subject", kind="stable").reset_index(drop=True)
        long = longitudinal.sort_values(["subject", "time"], kind="stable").reset_index(drop=True)
        _validate(long, surv, long_covs, surv_covs)

        ids = surv["subject"].to_numpy()
        index = pd.Index(ids)
        obs_subject = index.get_indexer(long["subject"].to_numpy())
        first_rows = long.groupby("subject", sort=True).first()
        w_long = first_rows.loc[ids, long_covs].to_numpy(dtype=float) if long_covs else np.zeros((len(ids), 0))
        return cls(
            subject_ids=ids,
            entry=surv["entry"].to_numpy(dtype=float),
            exit=surv["exit"].to_numpy(dtype=float),
            event=surv["event"].to_numpy(dtype=float),
            w_surv=surv[surv_covs].to_numpy(dtype=float) if surv_covs else np.zeros((len(ids), 0)),
            surv_names=list(surv_covs),
            w_long=w_long,
            long_names=list(long_covs),
            obs_subject=obs_subject,
            obs_time=long["time"].to_numpy(dtype=float),
            obs_value=long["value"].to_numpy(dtype=float),
        )

    def longitudinal_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "subject": self.subject_ids[self.obs_subject],
            "time": self.obs_time,
            "value": self.obs_value,
        })

    def permuted(self, perm: np.ndarray) -> "Dataset":
        """Same data with subject i moved to position where perm[new] = old."""
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        order = np.argsort(inverse[self.obs_subject], kind="stable")
        return Dataset(
            subject_ids=self.subject_ids[perm],
            entry=self.entry[perm],
            exit=self.exit[perm],
            event=self.event[perm],
            w_surv=self.w_surv[perm],
            surv_names=self.surv_names,
            w_long=self.w_long[perm],
            long_names=self.long_names,
            obs_subject=inverse[self.obs_subject][order],
            obs_time=self.obs_time[order],
            obs_value=self.obs_value[order],
        )


def _validate(long: pd.DataFrame, surv: pd.DataFrame, long_covs: list[str], surv_covs: list[str]):
    for name, frame, cols in (("longitudinal", long, ["time", "value", *long_covs]),
                              ("survival", surv, ["entry", "exit", "event", *surv_covs])):
        values = frame[cols].apply(pd.to_numeric, errors="coerce")
        if values.isna().any().any():
            bad = values.columns[values.isna().any()].tolist()
            raise DataError(f"{name} data has missing or non-numeric values in {bad}")
    if (long["time"] < 0).any():
        raise DataError("longitudinal data has negative times")
    if ((surv["entry"] < 0) | (surv["exit"] < 0)).any():
        raise DataError("survival data has negative times")
    if long.duplicated(["subject", "time"]).any():
        dup = long.loc[long.duplicated(["subject", "time"]), ["subject", "time"]].iloc[0].tolist()
        raise DataError(f"duplicate (subject, time) pair {dup}")
    if surv["subject"].duplicated().any():
        raise DataError("survival data lists a subject more than once")
    if not set(surv["event"].unique()) <= {0, 1}:
        raise DataError("event column must be 0/1")
    if (surv["exit"] < surv["entry"]).any():
        raise DataError("exit before entry (event or censoring before study entry)")
    if ((surv["event"] == 1) & (surv["exit"] <= 0)).any():
        raise DataError("events at time 0 are not supported")
    long_ids, surv_ids = set(long["subject"].unique()), set(surv["subject"].unique())
    if long_ids != surv_ids:
        raise DataError(
            f"subject sets differ: {len(long_ids - surv_ids)} only longitudinal, "
            f"{len(surv_ids - long_ids)} only survival"
        )
    exits = surv.set_index("subject")["exit"]
    if (long["time"].to_numpy() > exits.loc[long["subject"]].to_numpy() + 1e-12).any():
        raise DataError("measurement recorded after the subject's exit time")


def gauss_legendre(a: np.ndarray, b: np.ndarray, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(n_nodes)
    a = np.atleast_1d(np.asarray(a, dtype=float))[:, None]
    b = np.atleast_1d(np.asarray(b, dtype=float))[:, None]
    half = 0.5 * (b - a)
    return half * x[None, :] + 0.5 * (a + b), half * w[None, :]


# ── Baseline hazard ─────────────────────────────────────────────────

class HazardSpec:
    def __init__(self, kind: str, quadrature_nodes: int = 15, cfg: KnotConfig | None = None, knot_quantile: float = 0.5):
        if quadrature_nodes < 7:
            raise ValueError("quadrature_nodes must be >= 7")
        if kind not in ("weibull", "spline"):
            raise ValueError(f"unknown hazard kind {kind!r}")
        if kind == "spline" and cfg is None:
            raise ValueError("spline log-hazard needs a knot configuration")
        self.kind = kind
        self.quadrature_nodes = quadrature_nodes
        self.cfg = cfg
        self.knot_quantile = knot_quantile

    @classmethod
    def weibull(cls, quadrature_nodes: int = 15) -> "HazardSpec":
        return cls("weibull", quadrature_nodes)

    @classmethod
    def spline(cls, exit: np.ndarray, event: np.ndarray, t_max: float, knot_quantile: float = 0.5,
               quadrature_nodes: int = 15) -> "HazardSpec":
        times = exit[event == 1] if np.any(event == 1) else exit
        knot = float(np.quantile(times, knot_quantile))
        cfg = KnotConfig.with_knots(0.0, t_max, [knot])
        return cls("spline", quadrature_nodes, cfg, knot_quantile)

    @property
    def names(self) -> list[str]:
        if self.kind == "weibull":
            return ["log_shape", "log_scale"]
        return [f"hcoef[{k + 1}]" for k in range(self.cfg.n_basis)]

    @property
    def natural_names(self) -> list[str]:
        if self.kind == "weibull":
            return ["shape", "log_scale"]
        return self.names

    def design(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "weibull":
            return np.where(t > 0, np.log(np.where(t > 0, t, 1.0)), 0.0)
        return design_matrix(self.cfg, t)

    def log_h0(self, block: np.ndarray, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and Jacobian w.r.t. the unconstrained block."""
        if self.kind == "weibull":
            shape = np.exp(block[0])
            value = block[1] + block[0] + (shape - 1.0) * design
            jac = np.column_stack([1.0 + shape * design, np.ones_like(design)])
            return value, jac
        return design @ block, design

    def natural(self, block: np.ndarray) -> dict[str, Any]:
        if self.kind == "weibull":
            return {"shape": float(np.exp(block[0])), "log_scale": float(block[1])}
        return {"coef": np.array(block, dtype=float)}

    def log_h0_natural(self, hazard: dict[str, Any], t: np.ndarray | None = None,
                       design: np.ndarray | None = None) -> np.ndarray:
        if design is None:
            design = self.design(t)
        if self.kind == "weibull":
            return hazard["log_scale"] + np.log(hazard["shape"]) + (hazard["shape"] - 1.0) * design
        return design @ hazard["coef"]


# ── Parameter layout ────────────────────────────────────────────────

@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    subject_level: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParameterLayout:
    def __init__(self, blocks: list[Block]):
        self.blocks = blocks
        self.slices: dict[str, slice] = {}
        offset = 0
        for b in blocks:
            self.slices[b.name] = slice(offset, offset + b.size)
            offset += b.size
        self.dim = offset
        self._by_name = {b.name: b for b in blocks}

    def split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        return {b.name: theta[self.slices[b.name]].reshape(b.shape) for b in self.blocks}

    def join(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        theta = np.zeros(self.dim)
        for name, value in parts.items():
            theta[self.slices[name]] = np.ravel(value)
        return theta

    def labels(self) -> list[str]:
        out = []
        for b in self.blocks:
            if len(b.shape) == 2:
                out += [f"{b.name}[{i + 1},{k + 1}]" for i in range(b.shape[0]) for k in range(b.shape[1])]
            elif b.size == 1 and b.shape in ((1,), ()):
                out.append(b.name)
            else:
                out += [f"{b.name}[{k + 1}]" for k in range(b.size)]
        return out

    def permute_subjects(self, theta: np.ndarray, perm: np.ndarray) -> np.ndarray:
        parts = self.split(theta.copy())
        for b in self.blocks:
            if b.subject_level:
                parts[b.name] = parts[b.name][perm]
        return self.join(parts)


# ── SMRE identification ─────────────────────────────────────────────

def apply_smre_constraint(pop: np.ndarray, subj: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, bool]:
    """Rescale b_i2 to mean one and μ-coefficients by the same factor.

    Returns (pop, subj, degenerate); a degenerate draw (mean b_i2 == 0) is
    returned unchanged.
    """
    pop = np.array(pop, dtype=float)
    subj = np.array(subj, dtype=float)
    mean_b2 = subj[:, 2].mean()
    if abs(mean_b2) <= tol:
        return pop, subj, True
    subj[:, 2] /= mean_b2
    pop[2:] *= mean_b2
    return pop, subj, False


# ── Joint model ─────────────────────────────────────────────────────

@dataclass
class DrawRecord:
    tracked: np.ndarray
    pointwise: np.ndarray | None
    pop: np.ndarray | None = None
    subj: np.ndarray | None = None
    degenerate: bool = False


class JointModel:
    """Target density over the unconstrained parameter vector."""

    def __init__(
        self,
        data: Dataset,
        trajectory: TrajectoryModel,
        hazard: HazardSpec,
        wiv: WivSpec,
        priors: PriorConfig | None = None,
        init_hints: dict[str, np.ndarray] | None = None,
        survival_weight: float = 1.0,
    ):
        self.data = data
        self.trajectory = trajectory
        self.hazard = hazard
        self.wiv_spec = wiv
        self.priors = priors or PriorConfig()
        self.init_hints = init_hints or {}
        self.survival_weight = survival_weight
        self.include_subjects = False

        if data.t_max > trajectory.t_max:
            raise DomainError(f"data extend to {data.t_max}, trajectory basis ends at {trajectory.t_max}")

        n = data.n
        self.layout = self._build_layout()
        self.dim = self.layout.dim

        self.obs_pts: PointSet = trajectory.points(data.obs_subject, data.obs_time, n)
        nodes, weights = gauss_legendre(data.entry, data.exit, hazard.quadrature_nodes)
        self.quad_weights = weights
        haz_subject = np.concatenate([np.arange(n), np.repeat(np.arange(n), hazard.quadrature_nodes)])
        haz_time = np.concatenate([data.exit, nodes.ravel()])
        self.haz_pts: PointSet = trajectory.points(haz_subject, haz_time, n, wiv)
        self.haz_design = hazard.design(haz_time)

        if trajectory.variant != "rspline":
            m = trajectory.pop_family.size
            pen = difference_matrix(2, m, ridge=self.priors.ridge)
            self.rw2 = pen.regularized()
            self.rw2_logdet = float(np.linalg.slogdet(self.rw2)[1])
        logger.info(
            f"Joint model: {trajectory.variant}/{wiv.kind}/{hazard.kind}, n={n}, "
            f"n_obs={data.n_obs}, dim={self.dim}"
        )

    # ── Layout ──

    def _build_layout(self) -> ParameterLayout:
        d, tr = self.data, self.trajectory
        n = d.n
        blocks = [
            Block("beta_L", (len(d.long_names),)),
            Block("gamma", (len(d.surv_names),)),
            Block("alpha", (2,)),
            Block("log_sigma2_e", (1,)),
            Block("hazard", (len(self.hazard.names),)),
        ]
        k_s = tr.subj_family.size if tr.subj_family is not None else 0
        if tr.variant == "rspline":
            blocks += [Block("beta", (tr.n_pop,)), Block("log_sigma2_b", (tr.n_subj,)),
                       Block("z_b", (n, tr.n_subj), True)]
        elif tr.variant == "pspline":
            blocks += [Block("beta", (tr.n_pop,)), Block("log_tau_beta", (1,)),
                       Block("log_sigma2_b0", (1,)), Block("log_sigma2_b1", (1,)),
                       Block("log_tau", (k_s,)),
                       Block("z_b0", (n,), True), Block("z_b1", (n,), True),
                       Block("log_s", (n,), True), Block("z_zeta", (n, k_s), True)]
        elif tr.variant == "fpca":
            blocks += [Block("beta", (tr.n_pop,)), Block("log_tau_beta", (1,)),
                       Block("log_nu2", (k_s,)), Block("z_zeta", (n, k_s), True)]
        else:
            blocks += [Block("beta_lin", (2,)), Block("beta", (tr.n_pop - 2,)), Block("log_tau_beta", (1,)),
                       Block("log_sigma2_b0", (1,)), Block("log_sigma2_b1", (1,)), Block("log_sigma2_b2", (1,)),
                       Block("z_b0", (n,), True), Block("z_b1", (n,), True), Block("z_b2", (n,), True)]
        return ParameterLayout(blocks)

    # ── Natural parameters ──

    def natural(self, theta: np.ndarray) -> dict[str, Any]:
        p = self.layout.split(np.asarray(theta, dtype=float))
        return self._natural(p)

    def _natural(self, p: dict[str, np.ndarray]) -> dict[str, Any]:
        v = self.trajectory.variant
        nat: dict[str, Any] = {
            "beta_L": p["beta_L"],
            "gamma": p["gamma"],
            "alpha1": float(p["alpha"][0]),
            "alpha2": float(p["alpha"][1]),
            "sigma2_e": float(np.exp(p["log_sigma2_e"][0])),
            "hazard": self.hazard.natural(p["hazard"]),
        }
        if v == "rspline":
            sd = np.exp(0.5 * p["log_sigma2_b"])
            nat["sigma2_b"] = sd ** 2
            nat["pop"] = p["beta"]
            nat["subj"] = p["z_b"] * sd[None, :]
        elif v == "pspline":
            sd0, sd1 = np.exp(0.5 * p["log_sigma2_b0"][0]), np.exp(0.5 * p["log_sigma2_b1"][0])
            s, tau = np.exp(p["log_s"]), np.exp(p["log_tau"])
            zeta = p["z_zeta"] * s[:, None] * tau[None, :]
            nat.update(tau_beta=float(np.exp(p["log_tau_beta"][0])), sigma2_b0=sd0 ** 2, sigma2_b1=sd1 ** 2,
                       s=s, tau=tau)
            nat["pop"] = p["beta"]
            nat["subj"] = np.column_stack([p["z_b0"] * sd0, p["z_b1"] * sd1, zeta])
        elif v == "fpca":
            nu = np.exp(0.5 * p["log_nu2"])
            nat.update(tau_beta=float(np.exp(p["log_tau_beta"][0])), nu2=nu ** 2)
            nat["pop"] = p["beta"]
            nat["subj"] = p["z_zeta"] * nu[None, :]
        else:
            sds = [np.exp(0.5 * p[f"log_sigma2_b{j}"][0]) for j in range(3)]
            nat.update(tau_beta=float(np.exp(p["log_tau_beta"][0])),
                       sigma2_b0=sds[0] ** 2, sigma2_b1=sds[1] ** 2, sigma2_b2=sds[2] ** 2)
            nat["pop"] = np.concatenate([p["beta_lin"], p["beta"]])
            nat["subj"] = np.column_stack([p["z_b0"] * sds[0], p["z_b1"] * sds[1], 1.0 + p["z_b2"] * sds[2]])
        return nat

    # ── Likelihood pieces ──

    def _m(self, nat: dict[str, Any], pts: PointSet) -> np.ndarray:
        return self.data.w_long[pts.subject] @ nat["beta_L"] + self.trajectory.mu(pts, nat["pop"], nat["subj"])

    def loglik_longitudinal(self, nat: dict[str, Any]) -> float:
        _check_finite(nat)
        r = self.data.obs_value - self._m(nat, self.obs_pts)
        s2 = nat["sigma2_e"]
        return float(-0.5 * len(r) * (LOG_2PI + np.log(s2)) - 0.5 * r @ r / s2)

    def _eta(self, nat: dict[str, Any], pts: PointSet, design: np.ndarray) -> np.ndarray:
        m = self._m(nat, pts)
        wiv = self.trajectory.wiv(pts, nat["pop"], nat["subj"], self.wiv_spec).value
        eta = self.hazard.log_h0_natural(nat["hazard"], design=design)
        return eta + (self.data.w_surv @ nat["gamma"])[pts.subject] + nat["alpha1"] * m + nat["alpha2"] * wiv

    def pointwise_survival(self, nat: dict[str, Any]) -> np.ndarray:
        """δ_i log h_i(T_i) − (H_i(T_i) − H_i(entry_i)) per subject."""
        _check_finite(nat)
        n, q = self.data.n, self.hazard.quadrature_nodes
        eta = self._eta(nat, self.haz_pts, self.haz_design)
        with np.errstate(over="ignore", invalid="ignore"):
            cum = (self.quad_weights * np.exp(eta[n:].reshape(n, q))).sum(axis=1)
            return np.where(self.data.event == 1, eta[:n], 0.0) - cum

    def loglik_survival(self, nat: dict[str, Any]) -> float:
        return float(self.pointwise_survival(nat).sum())

    def _single_subject(self, nat: dict[str, Any], subject: int, t: np.ndarray):
        sub_nat = dict(nat)
        sub_nat["subj"] = np.asarray(nat["subj"])[subject:subject + 1]
        pts = self.trajectory.points(np.zeros(len(t), dtype=int), t, 1, self.wiv_spec)
        w_long, w_surv = self.data.w_long[subject], self.data.w_surv[subject]
        m = w_long @ nat["beta_L"] + self.trajectory.mu(pts, nat["pop"], sub_nat["subj"])
        wiv = self.trajectory.wiv(pts, nat["pop"], sub_nat["subj"], self.wiv_spec).value
        return (self.hazard.log_h0_natural(nat["hazard"], t) + w_surv @ nat["gamma"]
                + nat["alpha1"] * m + nat["alpha2"] * wiv)

    def log_hazard(self, nat: dict[str, Any], subject: int, t: float) -> float:
        if t < self.data.entry[subject]:
            raise DomainError(f"t={t} precedes entry {self.data.entry[subject]} of subject {subject}")
        return float(self._single_subject(nat, subject, np.array([float(t)]))[0])

    def cum_hazard(self, nat: dict[str, Any], subject: int, a: float, b: float) -> float:
        if b < a:
            raise ValueError(f"cum_hazard needs a <= b, got [{a}, {b}]")
        if a < 0:
            raise ValueError(f"cum_hazard needs a >= 0, got {a}")
        if a == b:
            return 0.0
        nodes, weights = gauss_legendre(a, b, self.hazard.quadrature_nodes)
        return float(weights[0] @ np.exp(self._single_subject(nat, subject, nodes[0])))

    # ── Priors ──

    def log_prior(self, nat: dict[str, Any]) -> float:
        """Sum of prior log-densities on the natural scale."""
        pr, v = self.priors, self.trajectory.variant
        lp = normal_logpdf(nat["beta_L"], 0.0, pr.fixed_sd)
        lp += normal_logpdf(nat["gamma"], 0.0, pr.fixed_sd)
        lp += normal_logpdf([nat["alpha1"], nat["alpha2"]], 0.0, pr.fixed_sd)
        lp += inv_gamma_logpdf(nat["sigma2_e"], pr.ig_shape, pr.ig_scale)
        hz = nat["hazard"]
        if self.hazard.kind == "weibull":
            lp += half_cauchy_logpdf(hz["shape"], pr.weibull_shape_scale) + normal_logpdf(hz["log_scale"], 0.0, pr.fixed_sd)
        else:
            lp += normal_logpdf(hz["coef"], 0.0, pr.hazard_coef_sd)

        pop, subj = np.asarray(nat["pop"]), np.asarray(nat["subj"])
        if v == "rspline":
            lp += normal_logpdf(pop, 0.0, pr.fixed_sd)
            lp += normal_logpdf(subj, 0.0, np.sqrt(nat["sigma2_b"])[None, :])
            lp += inv_gamma_logpdf(nat["sigma2_b"], pr.ig_shape, pr.ig_scale)
            return lp

        beta = pop[2:] if v == "smre" else pop
        lp += structured_normal_logpdf(beta, nat["tau_beta"], self.rw2, self.rw2_logdet)
        lp += gamma_logpdf(nat["tau_beta"], pr.tau_beta_shape, pr.tau_beta_rate)
        if v == "fpca":
            lp += normal_logpdf(subj, 0.0, np.sqrt(nat["nu2"])[None, :])
            lp += inv_gamma_logpdf(nat["nu2"], pr.ig_shape, pr.ig_scale)
            return lp

        lp += normal_logpdf(subj[:, 0], 0.0, np.sqrt(nat["sigma2_b0"]))
        lp += normal_logpdf(subj[:, 1], 0.0, np.sqrt(nat["sigma2_b1"]))
        lp += inv_gamma_logpdf([nat["sigma2_b0"], nat["sigma2_b1"]], pr.ig_shape, pr.ig_scale)
        if v == "pspline":
            lp += normal_logpdf(subj[:, 2:], 0.0, nat["s"][:, None] * nat["tau"][None, :])
            lp += half_normal_logpdf(nat["s"], pr.local_scale_sd)
            lp += gamma_logpdf(nat["tau"], pr.global_shape, pr.global_rate)
        else:
            lp += normal_logpdf(pop[:2], 0.0, pr.fixed_sd)
            lp += normal_logpdf(subj[:, 2], 1.0, np.sqrt(nat["sigma2_b2"]))
            lp += inv_gamma_logpdf(nat["sigma2_b2"], pr.ig_shape, pr.ig_scale)
        return lp

    def log_jacobian(self, theta: np.ndarray) -> float:
        """log |d natural / d unconstrained| for the current layout."""
        p = self.layout.split(np.asarray(theta, dtype=float))
        n, v = self.data.n, self.trajectory.variant
        lj = p["log_sigma2_e"][0]
        if self.hazard.kind == "weibull":
            lj += p["hazard"][0]
        if v != "rspline":
            lj += p["log_tau_beta"][0]
        if v == "rspline":
            lj += p["log_sigma2_b"].sum() + n * 0.5 * p["log_sigma2_b"].sum()
        elif v == "pspline":
            k = p["log_tau"].size
            lj += p["log_sigma2_b0"][0] + p["log_sigma2_b1"][0] + p["log_s"].sum() + p["log_tau"].sum()
            lj += n * 0.5 * (p["log_sigma2_b0"][0] + p["log_sigma2_b1"][0])
            lj += k * p["log_s"].sum() + n * p["log_tau"].sum()
        elif v == "fpca":
            lj += p["log_nu2"].sum() + n * 0.5 * p["log_nu2"].sum()
        else:
            for j in range(3):
                lj += (1.0 + 0.5 * n) * p[f"log_sigma2_b{j}"][0]
        return float(lj)

    # ── Log posterior and gradient ──

    def log_posterior(self, theta: np.ndarray) -> float:
        return self.log_density_and_grad(theta)[0]

    def log_density_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.zeros_like(theta)
        with np.errstate(all="ignore"):
            value, grad = self._value_and_grad(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(theta)
        return value, grad

    def _value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        d, tr, pr = self.data, self.trajectory, self.priors
        p = self.layout.split(theta)
        g = {name: np.zeros_like(val) for name, val in p.items()}
        nat = self._natural(p)
        pop, subj = nat["pop"], nat["subj"]
        beta_l, gamma = p["beta_L"], p["gamma"]
        a1, a2 = p["alpha"]

        # longitudinal
        r = d.obs_value - self._m(nat, self.obs_pts)
        s2 = nat["sigma2_e"]
        lp = -0.5 * len(r) * (LOG_2PI + p["log_sigma2_e"][0]) - 0.5 * r @ r / s2
        g_m_obs = r / s2
        g["log_sigma2_e"][0] += -0.5 * len(r) + 0.5 * r @ r / s2
        g["beta_L"] += d.w_long.T @ (self.obs_pts.incidence @ g_m_obs)
        g_pop, g_subj = tr.backprop(self.obs_pts, pop, subj, g_m_obs)

        # survival
        n, q = d.n, self.hazard.quadrature_nodes
        hp = self.haz_pts
        m_h = d.w_long[hp.subject] @ beta_l + tr.mu(hp, pop, subj)
        terms = tr.wiv(hp, pop, subj, self.wiv_spec)
        eta0, jac0 = self.hazard.log_h0(p["hazard"], self.haz_design)
        eta = eta0 + (d.w_surv @ gamma)[hp.subject] + a1 * m_h + a2 * terms.value
        hz = np.exp(eta[n:].reshape(n, q)) * self.quad_weights
        w = self.survival_weight
        lp += w * (d.event @ eta[:n] - hz.sum())
        g_eta = w * np.concatenate([d.event, -hz.ravel()])
        per_subject = hp.incidence @ g_eta
        g["gamma"] += d.w_surv.T @ per_subject
        g["beta_L"] += a1 * (d.w_long.T @ per_subject)
        g["alpha"] += [g_eta @ m_h, g_eta @ terms.value]
        g["hazard"] += jac0.T @ g_eta
        gp, gs = tr.backprop(hp, pop, subj, a1 * g_eta, a2 * g_eta, self.wiv_spec, terms)
        g_pop = g_pop + gp
        g_subj = g_subj + gs

        # common priors (unconstrained scale)
        for name in ("beta_L", "gamma", "alpha"):
            lp += normal_logpdf(p[name], 0.0, pr.fixed_sd)
            g[name] += normal_grad(p[name], 0.0, pr.fixed_sd)
        val, grad = inv_gamma_log(p["log_sigma2_e"], pr.ig_shape, pr.ig_scale)
        lp += val
        g["log_sigma2_e"] += grad
        if self.hazard.kind == "weibull":
            val, grad = half_cauchy_log(p["hazard"][0], pr.weibull_shape_scale)
            lp += val + normal_logpdf(p["hazard"][1], 0.0, pr.fixed_sd)
            g["hazard"] += [grad, normal_grad(p["hazard"][1], 0.0, pr.fixed_sd)]
        else:
            lp += normal_logpdf(p["hazard"], 0.0, pr.hazard_coef_sd)
            g["hazard"] += normal_grad(p["hazard"], 0.0, pr.hazard_coef_sd)

        lp += self._variant_terms(p, nat, g_pop, g_subj, g)
        grad = np.concatenate([g[b.name].ravel() for b in self.layout.blocks])
        return float(lp), grad

    def _rw2_terms(self, p, beta, g_beta_out, g) -> float:
        tau = np.exp(p["log_tau_beta"][0])
        quad = beta @ self.rw2 @ beta
        m = len(beta)
        lp = 0.5 * (m * p["log_tau_beta"][0] + self.rw2_logdet) - 0.5 * m * LOG_2PI - 0.5 * tau * quad
        g_beta_out -= tau * (self.rw2 @ beta)
        g["log_tau_beta"][0] += 0.5 * m - 0.5 * tau * quad
        val, grad = gamma_log(p["log_tau_beta"], self.priors.tau_beta_shape, self.priors.tau_beta_rate)
        g["log_tau_beta"] += grad
        return lp + val

    def _std_normal(self, p, name, g) -> float:
        z = p[name]
        g[name] -= z
        return float(-0.5 * np.sum(z ** 2) - 0.5 * z.size * LOG_2PI)

    def _variance(self, p, name, g, scale_grad) -> float:
        """IG prior on exp(u) plus chain rule through sd = exp(u/2)."""
        val, grad = inv_gamma_log(p[name], self.priors.ig_shape, self.priors.ig_scale)
        g[name] += grad + scale_grad
        return val

    def _variant_terms(self, p, nat, g_pop, g_subj, g) -> float:
        pr, v = self.priors, self.trajectory.variant
        lp = 0.0
        if v == "rspline":
            sd = np.exp(0.5 * p["log_sigma2_b"])
            g["beta"] += g_pop + normal_grad(p["beta"], 0.0, pr.fixed_sd)
            lp += normal_logpdf(p["beta"], 0.0, pr.fixed_sd)
            g["z_b"] += g_subj * sd[None, :]
            lp += self._std_normal(p, "z_b", g)
            lp += self._variance(p, "log_sigma2_b", g, 0.5 * np.sum(g_subj * nat["subj"], axis=0))
            return lp

        if v == "smre":
            g["beta_lin"] += g_pop[:2] + normal_grad(p["beta_lin"], 0.0, pr.fixed_sd)
            lp += normal_logpdf(p["beta_lin"], 0.0, pr.fixed_sd)
            g["beta"] += g_pop[2:]
        else:
            g["beta"] += g_pop
        lp += self._rw2_terms(p, p["beta"], g["beta"], g)

        subj = nat["subj"]
        if v == "fpca":
            nu = np.exp(0.5 * p["log_nu2"])
            g["z_zeta"] += g_subj * nu[None, :]
            lp += self._std_normal(p, "z_zeta", g)
            lp += self._variance(p, "log_nu2", g, 0.5 * np.sum(g_subj * subj, axis=0))
            return lp

        for j in (0, 1):
            sd = np.exp(0.5 * p[f"log_sigma2_b{j}"][0])
            g[f"z_b{j}"] += g_subj[:, j] * sd
            lp += self._std_normal(p, f"z_b{j}", g)
            lp += self._variance(p, f"log_sigma2_b{j}", g, 0.5 * g_subj[:, j] @ subj[:, j])

        if v == "pspline":
            s, tau = np.exp(p["log_s"]), np.exp(p["log_tau"])
            g_zeta = g_subj[:, 2:]
            zeta = subj[:, 2:]
            g["z_zeta"] += g_zeta * s[:, None] * tau[None, :]
            lp += self._std_normal(p, "z_zeta", g)
            contrib = g_zeta * zeta
            val, grad = half_normal_log(p["log_s"], pr.local_scale_sd)
            lp += val
            g["log_s"] += contrib.sum(axis=1) + grad
            val, grad = gamma_log(p["log_tau"], pr.global_shape, pr.global_rate)
            lp += val
            g["log_tau"] += contrib.sum(axis=0) + grad
        else:
            sd2 = np.exp(0.5 * p["log_sigma2_b2"][0])
            g["z_b2"] += g_subj[:, 2] * sd2
            lp += self._std_normal(p, "z_b2", g)
            lp += self._variance(p, "log_sigma2_b2", g, 0.5 * g_subj[:, 2] @ (subj[:, 2] - 1.0))
        return lp

    # ── Sampler hooks ──

    def tracked_names(self) -> list[str]:
        d, tr = self.data, self.trajectory
        names = [f"beta_L[{k + 1}]" for k in range(len(d.long_names))]
        names += [f"gamma[{k + 1}]" for k in range(len(d.surv_names))]
        names += ["alpha1", "alpha2", "sigma2_e"] + self.hazard.natural_names + list(tr.pop_names)
        v = tr.variant
        if v == "rspline":
            names += [f"sigma2_b[{k + 1}]" for k in range(tr.n_subj)]
        elif v == "pspline":
            names += ["tau_beta", "sigma2_b0", "sigma2_b1"] + [f"tau[{k + 1}]" for k in range(tr.subj_family.size)]
        elif v == "fpca":
            names += ["tau_beta"] + [f"nu2[{k + 1}]" for k in range(tr.subj_family.size)]
        else:
            names += ["tau_beta", "sigma2_b0", "sigma2_b1", "sigma2_b2"]
        if self.include_subjects:
            names += [f"{s}[{i + 1}]" for i in range(d.n) for s in tr.subj_names]
        return names

    def record(self, theta: np.ndarray) -> DrawRecord:
        nat = self.natural(theta)
        pop, subj, degenerate = nat["pop"], nat["subj"], False
        if self.trajectory.variant == "smre":
            pop, subj, degenerate = apply_smre_constraint(pop, subj)
        hz = nat["hazard"]
        hz_vals = [hz["shape"], hz["log_scale"]] if self.hazard.kind == "weibull" else list(hz["coef"])
        v = self.trajectory.variant
        parts = [nat["beta_L"], nat["gamma"], [nat["alpha1"], nat["alpha2"], nat["sigma2_e"]], hz_vals, pop]
        if v == "rspline":
            parts.append(nat["sigma2_b"])
        elif v == "pspline":
            parts += [[nat["tau_beta"], nat["sigma2_b0"], nat["sigma2_b1"]], nat["tau"]]
        elif v == "fpca":
            parts += [[nat["tau_beta"]], nat["nu2"]]
        else:
            parts.append([nat["tau_beta"], nat["sigma2_b0"], nat["sigma2_b1"], nat["sigma2_b2"]])
        if self.include_subjects:
            parts.append(subj.ravel())
        tracked = np.concatenate([np.ravel(np.asarray(x, dtype=float)) for x in parts])
        return DrawRecord(tracked=tracked, pointwise=self.pointwise_survival(nat), pop=pop, subj=subj,
                          degenerate=degenerate)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Data-informed centre plus N(0, 0.1^2) jitter on every coordinate."""
        centre = self._init_centre()
        return centre + 0.1 * rng.standard_normal(self.dim)

    def _init_centre(self) -> np.ndarray:
        d, tr = self.data, self.trajectory
        parts: dict[str, np.ndarray] = {}
        a = self.obs_pts.a
        pen = difference_matrix(2, a.shape[1], ridge=self.priors.ridge).regularized()
        mean_coef = self.init_hints.get("mean_coeffs")
        if mean_coef is None or len(mean_coef) != a.shape[1]:
            mean_coef, _, _ = penalized_fit_gcv(a, d.obs_value, pen)
        resid_var = float(np.var(d.obs_value - a @ mean_coef)) or 1.0
        parts["beta"] = mean_coef
        parts["log_sigma2_e"] = np.array([np.log(0.5 * resid_var)])
        exposure = float(np.sum(d.exit - d.entry)) or 1.0
        rate = max(float(d.event.sum()), 0.5) / exposure
        if self.hazard.kind == "weibull":
            parts["hazard"] = np.array([0.0, np.log(rate)])
        else:
            parts["hazard"] = np.full(len(self.hazard.names), np.log(rate))
        v = tr.variant
        if v == "rspline":
            parts["log_sigma2_b"] = np.full(tr.n_subj, np.log(0.5 * resid_var))
        elif v == "fpca":
            nu2 = self.init_hints.get("nu2")
            parts["log_nu2"] = np.log(nu2) if nu2 is not None else np.zeros(tr.subj_family.size)
        elif v == "pspline":
            parts["log_sigma2_b0"] = np.array([np.log(0.5 * resid_var)])
        elif v == "smre":
            parts["log_sigma2_b0"] = np.array([np.log(0.5 * resid_var)])
            parts["log_sigma2_b2"] = np.array([np.log(0.01)])
        return self.layout.join(parts)


def _check_finite(nat: dict[str, Any]):
    for key in ("beta_L", "gamma", "alpha1", "alpha2", "sigma2_e", "pop", "subj"):
        if not np.all(np.isfinite(np.asarray(nat[key], dtype=float))):
            raise NumericError(f"non-finite parameter block {key!r}")
