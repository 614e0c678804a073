"""Trajectory evaluation, curvature WIV and gradient pull-back for all representations."""

import numpy as np
import pytest

from app.splines import KnotConfig, SplineFamily, build_ortho_basis, rspline_knots
from app.trajectory import (
    TrajectoryModel,
    WivSpec,
    eval_mu,
    eval_mu_dd,
    eval_wiv,
    export_trajectories,
)

T_END = 10.0
VARIANTS = ("rspline", "pspline", "fpca", "smre")


@pytest.fixture(scope="module")
def models():
    rng = np.random.default_rng(3)
    mean_cfg = KnotConfig.equally_spaced(0.0, T_END, 13)
    ortho = build_ortho_basis(KnotConfig.equally_spaced(0.0, T_END, 40), grid_size=401)
    eigen = SplineFamily(KnotConfig.equally_spaced(0.0, T_END, 10), rng.normal(size=(10, 3)))
    return {
        "rspline": TrajectoryModel.rspline(rspline_knots(np.linspace(0.0, T_END, 30), "midpoint", 0.0, T_END)),
        "pspline": TrajectoryModel.pspline(mean_cfg, ortho),
        "fpca": TrajectoryModel.fpca(mean_cfg, eigen),
        "smre": TrajectoryModel.smre(mean_cfg),
    }


def _coefficients(model: TrajectoryModel, rng: np.random.Generator, n_subjects: int = 1):
    pop = rng.normal(size=model.n_pop)
    subj = rng.normal(size=(n_subjects, model.n_subj))
    if model.subject_scale:
        subj[:, 2] = 1.0 + 0.3 * rng.normal(size=n_subjects)
    return pop, subj


def _dense_points(model, grid):
    return model.points(np.zeros(len(grid), dtype=int), grid, 1, WivSpec(kind="current"))


class TestCurvatureOracle:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_cumulative_matches_riemann_sum(self, models, variant):
        model = models[variant]
        rng = np.random.default_rng(42)
        t = 7.5
        panels = 100_000
        mids = (np.arange(panels) + 0.5) * (t / panels)
        spec = WivSpec(kind="cumulative")
        pts = _dense_points(model, mids)
        for _ in range(20):
            pop, subj = _coefficients(model, rng)
            riemann = np.sqrt(np.sum(model.mu_dd_points(pts, pop, subj) ** 2) * (t / panels))
            np.testing.assert_allclose(eval_wiv(model, pop, subj, spec, t), riemann, rtol=1e-6)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_window_equals_cumulative_before_width(self, models, variant):
        model = models[variant]
        rng = np.random.default_rng(42)
        pop, subj = _coefficients(model, rng)
        for t in (0.0, 0.3, 0.77, 1.0):
            cumulative = eval_wiv(model, pop, subj, WivSpec(kind="cumulative"), t)
            windowed = eval_wiv(model, pop, subj, WivSpec(kind="windowed", window=1.0), t)
            assert windowed == cumulative

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_window_is_bounded_by_cumulative(self, models, variant):
        model = models[variant]
        rng = np.random.default_rng(11)
        pop, subj = _coefficients(model, rng)
        for t in (2.0, 5.5, 9.0):
            cumulative = eval_wiv(model, pop, subj, WivSpec(kind="cumulative"), t)
            windowed = eval_wiv(model, pop, subj, WivSpec(kind="windowed", window=1.5), t)
            assert windowed <= cumulative * (1 + 1e-10) + 1e-12

    def test_cumulative_is_zero_at_origin(self, models):
        model = models["pspline"]
        pop, subj = _coefficients(model, np.random.default_rng(0))
        assert eval_wiv(model, pop, subj, WivSpec(kind="cumulative"), 0.0) == 0.0


class TestCurrentCurvature:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_second_derivative_matches_finite_difference(self, models, variant):
        model = models[variant]
        rng = np.random.default_rng(42)
        pop, subj = _coefficients(model, rng)
        h = 1e-3
        for t in (2.3, 6.7):
            fd = (eval_mu(model, pop, subj, t + h) - 2 * eval_mu(model, pop, subj, t)
                  + eval_mu(model, pop, subj, t - h)) / h ** 2
            np.testing.assert_allclose(eval_mu_dd(model, pop, subj, t), fd, atol=1e-4)
            assert eval_wiv(model, pop, subj, WivSpec(kind="current"), t) == pytest.approx(abs(fd), abs=1e-4)

    def test_linear_parts_have_no_curvature(self, models):
        model = models["smre"]
        pop = np.zeros(model.n_pop)
        pop[:2] = [1.0, 0.5]
        subj = np.array([[0.3, -0.2, 1.0]])
        assert eval_mu_dd(model, pop, subj, 4.0) == pytest.approx(0.0, abs=1e-12)
        assert eval_mu(model, pop, subj, 4.0) == pytest.approx(1.0 + 2.0 + 0.3 - 0.8)


class TestBackprop:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("kind", ["current", "cumulative", "windowed"])
    def test_gradient_matches_finite_difference(self, models, variant, kind):
        model = models[variant]
        rng = np.random.default_rng(42)
        n = 3
        pop, subj = _coefficients(model, rng, n)
        spec = WivSpec(kind=kind, window=2.0)
        subject = np.repeat(np.arange(n), 4)
        time = rng.uniform(0.5, 9.5, len(subject))
        pts = model.points(subject, time, n, spec)
        w_mu = rng.normal(size=len(time))
        w_wiv = rng.normal(size=len(time))

        def objective(p, s):
            return float(w_mu @ model.mu(pts, p, s) + w_wiv @ model.wiv(pts, p, s, spec).value)

        g_pop, g_subj = model.backprop(pts, pop, subj, w_mu, w_wiv, spec)
        h = 1e-6
        fd_pop = np.array([
            (objective(pop + h * e, subj) - objective(pop - h * e, subj)) / (2 * h) for e in np.eye(len(pop))
        ])
        fd_subj = np.zeros_like(subj)
        for idx in np.ndindex(subj.shape):
            step = np.zeros_like(subj)
            step[idx] = h
            fd_subj[idx] = (objective(pop, subj + step) - objective(pop, subj - step)) / (2 * h)
        np.testing.assert_allclose(g_pop, fd_pop, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(g_subj, fd_subj, rtol=1e-5, atol=1e-6)


class TestScalarApi:
    def test_wrong_coefficient_count(self, models):
        model = models["pspline"]
        with pytest.raises(ValueError):
            eval_mu(model, np.zeros(model.n_pop + 1), np.zeros((1, model.n_subj)), 1.0)

    def test_negative_time_wiv(self, models):
        model = models["fpca"]
        pop, subj = _coefficients(model, np.random.default_rng(0))
        with pytest.raises(ValueError):
            eval_wiv(model, pop, subj, WivSpec(kind="cumulative"), -0.1)

    def test_wiv_spec_validation(self):
        with pytest.raises(ValueError):
            WivSpec(kind="windowed", window=0.0)
        with pytest.raises(ValueError):
            WivSpec(kind="cumulative", t0=1.0)

    def test_parameter_counts(self, models):
        assert models["rspline"].n_pop == 5 and models["rspline"].n_subj == 5
        assert models["pspline"].n_subj == 2 + models["pspline"].subj_family.size
        assert models["fpca"].n_subj == 3
        assert models["smre"].n_pop == 15 and models["smre"].n_subj == 3


class TestExport:
    def test_long_table(self, models):
        model = models["pspline"]
        pop, subj = _coefficients(model, np.random.default_rng(42), n_subjects=4)
        grid = np.linspace(0.0, T_END, 101)
        frame = export_trajectories(model, pop, subj, np.array([10, 20, 30, 40]), grid, WivSpec(kind="cumulative"))
        assert list(frame.columns) == ["subject", "time", "mu", "mu_dd", "wiv"]
        assert len(frame) == 404
        assert set(frame["subject"]) == {10, 20, 30, 40}
        first = frame[frame["subject"] == 10]
        np.testing.assert_allclose(first["mu"].iloc[37], eval_mu(model, pop, subj[:1], grid[37]), rtol=1e-12)
        assert first["wiv"].iloc[0] == 0.0
