"""No-U-Turn sampler with multinomial trajectory sampling.

Diagonal Euclidean metric, generalized U-turn criterion (including the
checks across adjacent subtrees), dual-averaging step size and windowed
metric adaptation. Each chain draws from its own generator seeded by
SeedSequence([seed, chain]) so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from itertools import repeat
from typing import Protocol

import arviz as az
import numpy as np
import pandas as pd

from app.config import SamplerConfig
from app.diagnostics import summarize
from app.errors import FitFailure, NumericError
from app.evaluate import to_inference_data
from app.retry import Rejected, retry_with_redraw

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
SAMPLER_COLUMNS = ("chain", "draw", "accept_stat", "divergent", "tree_depth")
DIVERGENCE_FAILURE_FRACTION = 0.25


class Target(Protocol):
    dim: int

    def log_density_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...

    def initial_point(self, rng: np.random.Generator) -> np.ndarray: ...

    def tracked_names(self) -> list[str]: ...

    def record(self, theta: np.ndarray): ...


# ── Phase-space state ───────────────────────────────────────────────

@dataclass
class _Point:
    theta: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray

    def copy(self) -> "_Point":
        return _Point(self.theta.copy(), self.p.copy(), self.lp, self.grad.copy())


@dataclass
class _Subtree:
    edge: _Point
    p_beg: np.ndarray
    p_sharp_beg: np.ndarray
    p_end: np.ndarray
    p_sharp_end: np.ndarray
    rho: np.ndarray
    log_sum_weight: float
    proposal: _Point
    valid: bool = True


@dataclass
class _Counters:
    n_leapfrog: int = 0
    sum_metro_prob: float = 0.0
    divergent: bool = False


@dataclass
class TransitionInfo:
    accept_stat: float
    n_leapfrog: int
    tree_depth: int
    divergent: bool
    energy: float


def _u_turn_free(p_sharp_minus: np.ndarray, p_sharp_plus: np.ndarray, rho: np.ndarray) -> bool:
    return bool(p_sharp_plus @ rho > 0 and p_sharp_minus @ rho > 0)


class NUTS:
    def __init__(self, target: Target, rng: np.random.Generator, max_tree_depth: int = 10):
        self.target = target
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.step_size = 1.0
        self.inv_metric = np.ones(target.dim)

    # ── Hamiltonian pieces ──

    def _sample_momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.target.dim) / np.sqrt(self.inv_metric)

    def _hamiltonian(self, z: _Point) -> float:
        h = -z.lp + 0.5 * float(z.p @ (self.inv_metric * z.p))
        return h if np.isfinite(h) else np.inf

    def _leapfrog(self, z: _Point, eps: float) -> _Point:
        p = z.p + 0.5 * eps * z.grad
        theta = z.theta + eps * self.inv_metric * p
        lp, grad = self.target.log_density_and_grad(theta)
        p = p + 0.5 * eps * grad
        return _Point(theta, p, lp, grad)

    def point(self, theta: np.ndarray) -> _Point:
        lp, grad = self.target.log_density_and_grad(theta)
        if not np.isfinite(lp):
            raise NumericError("log density is not finite at the starting point")
        return _Point(np.array(theta, dtype=float), np.zeros_like(theta), lp, grad)

    # ── Step size heuristic ──

    def find_reasonable_step_size(self, z: _Point) -> float:
        z = z.copy()
        eps = self.step_size
        z.p = self._sample_momentum()
        h0 = self._hamiltonian(z)
        delta = h0 - self._hamiltonian(self._leapfrog(z, eps))
        direction = 1 if delta > np.log(0.8) else -1
        for _ in range(100):
            z.p = self._sample_momentum()
            h0 = self._hamiltonian(z)
            delta = h0 - self._hamiltonian(self._leapfrog(z, eps))
            if direction == 1 and not delta > np.log(0.8):
                break
            if direction == -1 and not delta < np.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7:
                raise NumericError("posterior is improper: step size diverged during initialization")
            if eps == 0:
                raise NumericError("no acceptably small step size found; check the model for discontinuities")
        self.step_size = eps
        return eps

    # ── Tree building ──

    def _build_tree(self, depth: int, z: _Point, h0: float, direction: int, counters: _Counters) -> _Subtree:
        if depth == 0:
            z_new = self._leapfrog(z, direction * self.step_size)
            counters.n_leapfrog += 1
            h = self._hamiltonian(z_new)
            divergent = h - h0 > MAX_DELTA_H
            if divergent:
                counters.divergent = True
            counters.sum_metro_prob += 1.0 if h0 - h > 0 else float(np.exp(h0 - h))
            p_sharp = self.inv_metric * z_new.p
            return _Subtree(
                edge=z_new, p_beg=z_new.p, p_sharp_beg=p_sharp, p_end=z_new.p, p_sharp_end=p_sharp,
                rho=z_new.p.copy(), log_sum_weight=h0 - h, proposal=z_new, valid=not divergent,
            )

        first = self._build_tree(depth - 1, z, h0, direction, counters)
        if not first.valid:
            return first
        second = self._build_tree(depth - 1, first.edge, h0, direction, counters)
        if not second.valid:
            return second

        log_sum_weight = np.logaddexp(first.log_sum_weight, second.log_sum_weight)
        accept = np.exp(second.log_sum_weight - log_sum_weight)
        proposal = second.proposal if self.rng.uniform() < accept else first.proposal

        rho = first.rho + second.rho
        persist = _u_turn_free(first.p_sharp_beg, second.p_sharp_end, rho)
        persist &= _u_turn_free(first.p_sharp_beg, second.p_sharp_beg, first.rho + second.p_beg)
        persist &= _u_turn_free(first.p_sharp_end, second.p_sharp_end, second.rho + first.p_end)
        return _Subtree(
            edge=second.edge, p_beg=first.p_beg, p_sharp_beg=first.p_sharp_beg,
            p_end=second.p_end, p_sharp_end=second.p_sharp_end, rho=rho,
            log_sum_weight=log_sum_weight, proposal=proposal, valid=persist,
        )

    def transition(self, z: _Point) -> tuple[_Point, TransitionInfo]:
        z = z.copy()
        z.p = self._sample_momentum()
        h0 = self._hamiltonian(z)
        p_sharp = self.inv_metric * z.p

        z_fwd, z_bck = z, z
        # momenta at the two ends of the whole trajectory
        p_fwd, ps_fwd = z.p, p_sharp
        p_bck, ps_bck = z.p, p_sharp
        rho = z.p.copy()
        log_sum_weight = 0.0
        sample = z
        counters = _Counters()
        depth = 0

        while depth < self.max_tree_depth:
            forward = self.rng.uniform() > 0.5
            start = z_fwd if forward else z_bck
            sub = self._build_tree(depth, start, h0, 1 if forward else -1, counters)
            if not sub.valid:
                break
            depth += 1

            if sub.log_sum_weight > log_sum_weight:
                sample = sub.proposal
            elif self.rng.uniform() < np.exp(sub.log_sum_weight - log_sum_weight):
                sample = sub.proposal
            log_sum_weight = np.logaddexp(log_sum_weight, sub.log_sum_weight)

            old_rho = rho
            rho = old_rho + sub.rho
            if forward:
                z_fwd = sub.edge
                persist = _u_turn_free(ps_bck, sub.p_sharp_end, rho)
                persist &= _u_turn_free(ps_bck, sub.p_sharp_beg, old_rho + sub.p_beg)
                persist &= _u_turn_free(ps_fwd, sub.p_sharp_end, sub.rho + p_fwd)
                p_fwd, ps_fwd = sub.p_end, sub.p_sharp_end
            else:
                z_bck = sub.edge
                persist = _u_turn_free(sub.p_sharp_end, ps_fwd, rho)
                persist &= _u_turn_free(sub.p_sharp_beg, ps_fwd, old_rho + sub.p_beg)
                persist &= _u_turn_free(sub.p_sharp_end, ps_bck, sub.rho + p_bck)
                p_bck, ps_bck = sub.p_end, sub.p_sharp_end
            if not persist:
                break

        n_leapfrog = max(counters.n_leapfrog, 1)
        info = TransitionInfo(
            accept_stat=counters.sum_metro_prob / n_leapfrog,
            n_leapfrog=counters.n_leapfrog,
            tree_depth=depth,
            divergent=counters.divergent,
            energy=self._hamiltonian(sample),
        )
        return sample, info


# ── Adaptation ──────────────────────────────────────────────────────

class DualAveraging:
    def __init__(self, delta: float = 0.8, gamma: float = 0.05, kappa: float = 0.75, t0: float = 10.0):
        self.delta, self.gamma, self.kappa, self.t0 = delta, gamma, kappa, t0
        self.restart(1.0)

    def restart(self, step_size: float):
        self.mu = np.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** -self.kappa
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    def final(self) -> float:
        return float(np.exp(self.x_bar))


class _Welford:
    def __init__(self, dim: int):
        self.dim = dim
        self.restart()

    def restart(self):
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def add(self, x: np.ndarray):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1.0)


class WindowedAdaptation:
    """Fast initial buffer, doubling slow windows for the metric, fast terminal buffer."""

    def __init__(self, warmup: int, dim: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25):
        self.warmup = warmup
        self.enabled = warmup >= 20
        if init_buffer + term_buffer + base_window > warmup:
            init_buffer = int(0.15 * warmup)
            term_buffer = int(0.1 * warmup)
            base_window = warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer, self.window_size = init_buffer, term_buffer, base_window
        self.counter = 0
        self.next_window = init_buffer + base_window - 1
        self.estimator = _Welford(dim)

    def _in_window(self) -> bool:
        return (self.counter >= self.init_buffer
                and self.counter < self.warmup - self.term_buffer
                and self.counter != self.warmup)

    def _end_of_window(self) -> bool:
        return self.counter == self.next_window and self.counter != self.warmup

    def _compute_next_window(self):
        last = self.warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer:
            self.next_window = last

    def learn_variance(self, theta: np.ndarray) -> np.ndarray | None:
        """Feed one warmup draw; returns a new inverse metric at the end of a slow window."""
        if not self.enabled:
            return None
        if self._in_window():
            self.estimator.add(theta)
        if self._end_of_window():
            self._compute_next_window()
            n = self.estimator.n
            var = self.estimator.variance()
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self.estimator.restart()
            self.counter += 1
            return var
        self.counter += 1
        return None


# ── Initialization and chains ───────────────────────────────────────

def initialize(target: Target, rng: np.random.Generator, max_retries: int = 100) -> np.ndarray:
    """Draw a starting point with a finite log density and gradient."""

    def attempt(rng: np.random.Generator, _attempt: int) -> np.ndarray:
        theta = target.initial_point(rng)
        lp, grad = target.log_density_and_grad(theta)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            raise Rejected("non-finite log density at the proposed initial point")
        return theta

    return retry_with_redraw(attempt, rng, max_retries, operation="initialization")


@dataclass
class ChainResult:
    draws: np.ndarray
    pointwise: np.ndarray | None
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    warmup_divergences: int
    step_size: float
    inv_metric: np.ndarray
    pop_mean: np.ndarray | None
    subj_mean: np.ndarray | None
    degenerate: int
    seconds: float


def run_chain(target: Target, cfg: SamplerConfig, chain: int) -> ChainResult:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, chain]))
    started = time.monotonic()
    nuts = NUTS(target, rng, cfg.max_tree_depth)
    z = nuts.point(initialize(target, rng))
    nuts.find_reasonable_step_size(z)
    averaging = DualAveraging(delta=cfg.target_accept)
    averaging.restart(nuts.step_size)
    windows = WindowedAdaptation(cfg.warmup, target.dim)

    warmup_divergences = 0
    for it in range(cfg.warmup):
        z, info = nuts.transition(z)
        warmup_divergences += info.divergent
        nuts.step_size = averaging.learn(info.accept_stat)
        var = windows.learn_variance(z.theta)
        if var is not None:
            nuts.inv_metric = var
            nuts.find_reasonable_step_size(z)
            averaging.restart(nuts.step_size)
        if (it + 1) % max(1, cfg.warmup // 10) == 0:
            logger.debug(f"Chain {chain}: warmup {it + 1}/{cfg.warmup}, step size {nuts.step_size:.3g}")
    if cfg.warmup > 0:
        nuts.step_size = averaging.final()
    if warmup_divergences > DIVERGENCE_FAILURE_FRACTION * cfg.warmup:
        raise FitFailure(
            f"chain {chain}: {warmup_divergences} divergent transitions in {cfg.warmup} warmup iterations",
            diagnostics={"chain": chain, "warmup_divergences": warmup_divergences, "step_size": nuts.step_size},
        )

    keep = cfg.keep
    draws, pointwise = [], []
    accept, divergent, depth, leapfrogs = (np.zeros(keep), np.zeros(keep, dtype=bool),
                                           np.zeros(keep, dtype=int), np.zeros(keep, dtype=int))
    pop_sum = subj_sum = None
    degenerate = 0
    for it in range(keep):
        z, info = nuts.transition(z)
        accept[it], divergent[it], depth[it], leapfrogs[it] = (info.accept_stat, info.divergent,
                                                              info.tree_depth, info.n_leapfrog)
        rec = target.record(z.theta)
        draws.append(rec.tracked)
        if rec.pointwise is not None:
            pointwise.append(rec.pointwise)
        if rec.pop is not None:
            pop_sum = rec.pop.copy() if pop_sum is None else pop_sum + rec.pop
            subj_sum = rec.subj.copy() if subj_sum is None else subj_sum + rec.subj
        degenerate += rec.degenerate

    seconds = time.monotonic() - started
    logger.info(
        f"Chain {chain}: {keep} draws in {seconds:.1f}s, step size {nuts.step_size:.3g}, "
        f"mean accept {accept.mean():.2f}, {int(divergent.sum())} divergent"
    )
    return ChainResult(
        draws=np.array(draws),
        pointwise=np.array(pointwise) if pointwise else None,
        accept_stat=accept,
        divergent=divergent,
        tree_depth=depth,
        n_leapfrog=leapfrogs,
        warmup_divergences=warmup_divergences,
        step_size=nuts.step_size,
        inv_metric=nuts.inv_metric,
        pop_mean=pop_sum / keep if pop_sum is not None else None,
        subj_mean=subj_sum / keep if subj_sum is not None else None,
        degenerate=degenerate,
        seconds=seconds,
    )


@dataclass
class PosteriorDraws:
    names: list[str]
    draws: np.ndarray                      # (chains, keep, params)
    pointwise: np.ndarray | None           # (chains, keep, subjects)
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    warmup_divergences: list[int]
    step_size: list[float]
    inv_metric: np.ndarray
    pop_mean: np.ndarray | None = None
    subj_mean: np.ndarray | None = None
    degenerate_draws: int = 0
    seconds: float = 0.0
    _summary: pd.DataFrame | None = field(default=None, repr=False)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def summary(self) -> pd.DataFrame:
        if self._summary is None:
            self._summary = summarize(self.draws, self.names)
        return self._summary

    def to_inference_data(self) -> az.InferenceData:
        if self.pointwise is None:
            raise ValueError("no pointwise log-likelihood was recorded")
        return to_inference_data(self.pointwise, self.draws, self.names)

    def pooled_pointwise(self) -> np.ndarray:
        if self.pointwise is None:
            raise ValueError("no pointwise log-likelihood was recorded")
        return self.pointwise.reshape(-1, self.pointwise.shape[-1])

    def to_frame(self) -> pd.DataFrame:
        c, k, d = self.draws.shape
        frame = pd.DataFrame(self.draws.reshape(c * k, d), columns=self.names)
        frame.insert(0, "draw", np.tile(np.arange(k), c))
        frame.insert(0, "chain", np.repeat(np.arange(c), k))
        frame["accept_stat"] = self.accept_stat.ravel()
        frame["divergent"] = self.divergent.ravel().astype(int)
        frame["tree_depth"] = self.tree_depth.ravel()
        return frame

    def sampler_diagnostics(self) -> dict:
        return {
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "divergent": int(self.divergent.sum()),
            "warmup_divergences": [int(x) for x in self.warmup_divergences],
            "step_size": [float(x) for x in self.step_size],
            "mean_accept_stat": float(self.accept_stat.mean()),
            "max_tree_depth_observed": int(self.tree_depth.max()) if self.tree_depth.size else 0,
            "degenerate_draws": int(self.degenerate_draws),
            "seconds": round(self.seconds, 2),
        }


def draws_from_frame(frame: pd.DataFrame) -> tuple[np.ndarray, list[str]]:
    """Inverse of PosteriorDraws.to_frame for the tracked columns: (chains, draws, params) and names."""
    missing = {"chain", "draw"} - set(frame.columns)
    if missing:
        raise ValueError(f"draws frame lacks columns {sorted(missing)}")
    names = [c for c in frame.columns if c not in SAMPLER_COLUMNS]
    frame = frame.sort_values(["chain", "draw"])
    n_chains = frame["chain"].nunique()
    if len(frame) % n_chains:
        raise ValueError(f"{len(frame)} draws do not split evenly over {n_chains} chains")
    return frame[names].to_numpy(dtype=float).reshape(n_chains, -1, len(names)), names


def run_chains(target: Target, cfg: SamplerConfig, executor: Executor | None = None) -> PosteriorDraws:
    """Run cfg.chains chains, in executor when given, and stack their draws."""
    if executor is None:
        results = [run_chain(target, cfg, chain) for chain in range(cfg.chains)]
    else:
        results = list(executor.map(run_chain, repeat(target), repeat(cfg), range(cfg.chains)))
    has_pop = results[0].pop_mean is not None
    return PosteriorDraws(
        names=target.tracked_names(),
        draws=np.stack([r.draws for r in results]),
        pointwise=np.stack([r.pointwise for r in results]) if results[0].pointwise is not None else None,
        accept_stat=np.stack([r.accept_stat for r in results]),
        divergent=np.stack([r.divergent for r in results]),
        tree_depth=np.stack([r.tree_depth for r in results]),
        warmup_divergences=[r.warmup_divergences for r in results],
        step_size=[r.step_size for r in results],
        inv_metric=np.stack([r.inv_metric for r in results]),
        pop_mean=np.mean([r.pop_mean for r in results], axis=0) if has_pop else None,
        subj_mean=np.mean([r.subj_mean for r in results], axis=0) if has_pop else None,
        degenerate_draws=sum(r.degenerate for r in results),
        seconds=sum(r.seconds for r in results),
    )
