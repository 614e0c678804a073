import numpy as np
import pandas as pd
import pytest

from app.errors import DataError, NumericError
from app.fpca import (
    CovarianceSurface,
    eigendecompose,
    estimate_mean,
    fit_fpca,
    smooth_covariance,
    trapezoid_weights,
)
from app.splines import KnotConfig, design_matrix


def _random_slope_data(n: int = 60, visits: int = 8, seed: int = 42) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        b0, b1 = rng.normal(0.0, 1.0), rng.normal(0.0, 0.2)
        t = np.sort(rng.uniform(0.0, 10.0, visits))
        y = 1.0 + 0.3 * t + b0 + b1 * t + rng.normal(0.0, 0.1, visits)
        rows += [{"subject": i, "time": ti, "value": yi} for ti, yi in zip(t, y)]
    return pd.DataFrame(rows)


class TestTrapezoidWeights:
    def test_weights_sum_to_length(self):
        grid = np.linspace(0.0, 3.0, 31)
        np.testing.assert_allclose(trapezoid_weights(grid).sum(), 3.0)

    def test_integrates_linear_exactly(self):
        grid = np.sort(np.random.default_rng(42).uniform(0.0, 2.0, 40))
        w = trapezoid_weights(grid)
        np.testing.assert_allclose(w @ grid, 0.5 * (grid[-1] ** 2 - grid[0] ** 2))


class TestEigendecompose:
    @pytest.fixture
    def surface(self):
        grid = np.linspace(0.0, 1.0, 201)
        phi1 = np.sqrt(2.0) * np.sin(np.pi * grid)
        phi2 = np.sqrt(2.0) * np.cos(np.pi * grid)
        values = 4.0 * np.outer(phi1, phi1) + 1.0 * np.outer(phi2, phi2)
        return CovarianceSurface(grid, values, 0.0), phi1, phi2

    def test_recovers_known_spectrum(self, surface):
        surf, phi1, phi2 = surface
        eig = eigendecompose(surf, pve=0.999)
        assert eig.L == 2
        np.testing.assert_allclose(eig.eigenvalues, [4.0, 1.0], rtol=1e-3)
        np.testing.assert_allclose(eig.eigenfunctions[:, 0], phi1, atol=1e-3)
        assert abs(np.corrcoef(eig.eigenfunctions[:, 1], phi2)[0, 1]) > 0.9999

    def test_eigenfunctions_orthonormal_under_quadrature(self, surface):
        eig = eigendecompose(surface[0])
        gram = eig.eigenfunctions.T @ (eig.quadrature_weights[:, None] * eig.eigenfunctions)
        np.testing.assert_allclose(gram, np.eye(eig.L), atol=1e-10)

    def test_leading_function_has_positive_integral(self, surface):
        eig = eigendecompose(surface[0])
        assert eig.quadrature_weights @ eig.eigenfunctions[:, 0] > 0

    def test_pve_truncation(self, surface):
        assert eigendecompose(surface[0], pve=0.5).L == 1

    def test_invalid_pve(self, surface):
        with pytest.raises(ValueError):
            eigendecompose(surface[0], pve=0.0)

    def test_non_finite_surface(self, surface):
        surf = surface[0]
        bad = surf.values.copy()
        bad[3, 4] = np.nan
        with pytest.raises(NumericError):
            eigendecompose(CovarianceSurface(surf.grid, bad, 0.0))

    def test_zero_surface(self, surface):
        surf = surface[0]
        with pytest.raises(NumericError):
            eigendecompose(CovarianceSurface(surf.grid, np.zeros_like(surf.values), 0.0))


class TestMeanAndCovariance:
    def test_mean_recovers_linear_trend(self):
        data = _random_slope_data()
        cfg = KnotConfig.equally_spaced(0.0, 10.0, 13)
        coef = estimate_mean(data, cfg)
        grid = np.linspace(0.5, 9.5, 20)
        np.testing.assert_allclose(design_matrix(cfg, grid) @ coef, 1.0 + 0.3 * grid, atol=1.0)

    def test_mean_needs_data(self):
        cfg = KnotConfig.equally_spaced(0.0, 10.0, 13)
        with pytest.raises(DataError):
            estimate_mean(pd.DataFrame({"subject": [], "time": [], "value": []}), cfg)
        with pytest.raises(DataError):
            estimate_mean(pd.DataFrame({"subject": [1, 2], "time": [0.0, 1.0], "value": [1.0, 2.0]}), cfg)
        # ten observations on a single subject
        with pytest.raises(DataError):
            estimate_mean(pd.DataFrame({"subject": [7] * 10, "time": np.linspace(0.0, 9.0, 10),
                                        "value": np.ones(10)}), cfg)
        # two subjects but only nine observations
        with pytest.raises(DataError):
            estimate_mean(pd.DataFrame({"subject": [1] * 5 + [2] * 4, "time": np.linspace(0.0, 8.0, 9),
                                        "value": np.ones(9)}), cfg)
        coef = estimate_mean(pd.DataFrame({"subject": [1] * 5 + [2] * 5, "time": np.linspace(0.0, 9.0, 10),
                                           "value": np.full(10, 2.0)}), cfg)
        assert coef.shape == (cfg.n_basis,) and np.all(np.isfinite(coef))

    def test_covariance_needs_repeated_measures(self):
        data = pd.DataFrame({"subject": [1, 2, 3], "time": [0.0, 1.0, 2.0], "value": [0.1, -0.2, 0.3]})
        with pytest.raises(DataError):
            smooth_covariance(data, np.linspace(0.0, 2.0, 21))

    def test_covariance_surface_is_symmetric(self):
        data = _random_slope_data()
        surface = smooth_covariance(data.assign(value=data["value"] - data["value"].mean()),
                                    np.linspace(0.0, 10.0, 31))
        np.testing.assert_allclose(surface.values, surface.values.T, atol=1e-12)


class TestFitFpca:
    def test_end_to_end(self):
        data = _random_slope_data()
        mean_cfg = KnotConfig.equally_spaced(0.0, 10.0, 13)
        fit = fit_fpca(data, mean_cfg, grid_size=51, pve=0.999)
        assert 1 <= fit.eigen.L <= 13
        assert np.all(fit.eigen.eigenvalues > 0)
        # the leading component carries the random-intercept variance
        assert fit.eigen.eigenvalues[0] > 0.5 * fit.eigen.eigenvalues.sum()

    def test_spline_family_reproduces_eigenfunctions(self):
        data = _random_slope_data()
        fit = fit_fpca(data, KnotConfig.equally_spaced(0.0, 10.0, 13), grid_size=51)
        scale = np.abs(fit.eigen.eigenfunctions).max()
        np.testing.assert_allclose(fit.family.values(fit.eigen.grid), fit.eigen.eigenfunctions, atol=1e-8 * scale)


@pytest.mark.slow
class TestRankOneRecovery:
    """Sine mean plus one random-intercept component of unit variance."""

    @pytest.fixture(scope="class")
    def fit(self):
        rng = np.random.default_rng(42)
        n, visits = 1000, 10
        score = rng.normal(size=n)
        score = (score - score.mean()) / score.std()
        phi = 1.0 / np.sqrt(10.0)
        rows = []
        for i in range(n):
            t = np.sort(rng.uniform(0.0, 10.0, visits))
            y = np.sin(t) + score[i] * phi + rng.normal(0.0, 0.1, visits)
            rows += [{"subject": i, "time": ti, "value": yi} for ti, yi in zip(t, y)]
        return fit_fpca(pd.DataFrame(rows), KnotConfig.equally_spaced(0.0, 10.0, 13), grid_size=51)

    def test_leading_eigenvalue(self, fit):
        np.testing.assert_allclose(fit.eigen.eigenvalues[0], 1.0, rtol=0.1)

    def test_mean_function(self, fit):
        grid = np.linspace(0.5, 9.5, 91)
        err = design_matrix(fit.mean_cfg, grid) @ fit.mean_coeffs - np.sin(grid)
        assert np.abs(err).max() <= 0.05
