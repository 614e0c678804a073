"""Event-time inversion and the three data-generating cases."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from app.config import ScenarioConfig, ScenarioOverrides
from app.errors import ConfigError, NumericError
from app.simulate import (
    CASE2_VISITS,
    case2_cumulative_curvature,
    case2_mu,
    case2_mu_dd,
    generate,
    generate_case1,
    invert_cumulative_hazard,
    load_fixture,
    sample_event_time,
    weibull_log_h0,
    weibull_survival,
)

FIXTURE = Path(__file__).resolve().parents[1] / "fixtures" / "case3_generator.json"


class TestInversion:
    def test_constant_hazard(self):
        t = invert_cumulative_hazard(lambda t: np.full_like(t, 0.5), 1.0, 2.0, 20.0)
        np.testing.assert_allclose(t, 5.0, atol=1e-8)

    def test_weibull_with_delayed_entry(self):
        shape, log_scale, entry, target = 3.0, -4.0, 1.5, 0.7
        log_h0 = weibull_log_h0(shape, log_scale)
        t = invert_cumulative_hazard(lambda t: np.exp(log_h0(t)), entry, target, 30.0)
        expected = ((target + np.exp(log_scale) * entry ** shape) / np.exp(log_scale)) ** (1.0 / shape)
        np.testing.assert_allclose(t, expected, atol=1e-7)

    def test_past_horizon_is_infinite(self):
        assert invert_cumulative_hazard(lambda t: np.full_like(t, 0.01), 0.0, 5.0, 10.0) == np.inf
        assert invert_cumulative_hazard(lambda t: np.ones_like(t), 4.0, 1.0, 4.0) == np.inf

    def test_negative_hazard_rejected(self):
        with pytest.raises(NumericError):
            invert_cumulative_hazard(lambda t: np.full_like(t, -1.0), 0.0, 1.0, 10.0)

    def test_draws_follow_weibull(self):
        rng = np.random.default_rng(42)
        shape, log_scale = 2.0, -2.0
        log_h0 = weibull_log_h0(shape, log_scale)
        draws = np.array([sample_event_time(lambda t: np.exp(log_h0(t)), 0.0, rng, 50.0) for _ in range(400)])
        assert np.all(np.isfinite(draws))
        result = stats.kstest(draws, lambda t: 1.0 - weibull_survival(t, shape, log_scale))
        assert result.pvalue > 0.01


class TestCase2Closed:
    def test_second_derivative(self):
        b = np.array([1.2, 6.0, 0.8])
        t = np.linspace(0.5, 5.5, 11)
        h = 1e-4
        numeric = (case2_mu(b, t + h) - 2.0 * case2_mu(b, t) + case2_mu(b, t - h)) / h ** 2
        np.testing.assert_allclose(case2_mu_dd(b, t), numeric, atol=1e-5)

    def test_cumulative_curvature(self):
        b = np.array([1.7, 5.0, 1.3])
        for t in (0.3, 2.0, 4.5, 6.0):
            value, _ = integrate.quad(lambda s: case2_mu_dd(b, s) ** 2, 0.0, t, epsabs=0.0, epsrel=1e-12)
            np.testing.assert_allclose(case2_cumulative_curvature(b, t), value, rtol=1e-8)
        assert case2_cumulative_curvature(b, 0.0) == pytest.approx(0.0, abs=1e-12)


class TestCase1:
    @pytest.fixture(scope="class")
    def sim(self):
        return generate(ScenarioConfig(case="case1", n=60, seed=42))

    def test_frames(self, sim):
        assert list(sim.survival.columns) == ["subject", "entry", "exit", "event", "cov1"]
        assert list(sim.longitudinal.columns) == ["subject", "time", "value"]
        assert len(sim.survival) == 60
        assert set(sim.survival["cov1"].unique()) <= {0.0, 1.0}
        assert (sim.survival["entry"] == 0.0).all()
        assert (sim.survival["exit"] <= 10.0).all()

    def test_visits_before_exit(self, sim):
        merged = sim.longitudinal.merge(sim.survival, on="subject")
        assert (merged["time"] <= merged["exit"]).all()
        np.testing.assert_allclose(np.mod(sim.longitudinal["time"], 0.5), 0.0)
        assert (sim.visits_per_subject() >= 1).all()

    def test_truth_and_meta(self, sim):
        assert sim.truth == {"gamma[1]": -2.0, "alpha1": 0.2, "alpha2": 0.3, "sigma2_e": 1.0,
                             "shape": 3.0, "log_scale": -7.0}
        assert sim.meta["case"] == "case1"
        assert 0.0 < sim.censoring_rate < 1.0
        assert len(sim.true_mean) == len(sim.longitudinal)

    def test_same_seed_same_data(self, sim):
        again = generate(ScenarioConfig(case="case1", n=60, seed=42))
        pd.testing.assert_frame_equal(again.longitudinal, sim.longitudinal)
        pd.testing.assert_frame_equal(again.survival, sim.survival)

    def test_dataset_conversion(self, sim):
        data = sim.to_dataset()
        assert data.n == 60
        assert data.surv_names == ["cov1"]

    def test_null_and_overrides(self):
        cfg = ScenarioConfig(case="case1", n=5, seed=1, null_alpha2=True,
                             overrides=ScenarioOverrides(alpha1=0.5, zero_random_effects=True))
        sim = generate(cfg)
        assert sim.truth["alpha2"] == 0.0
        assert sim.truth["alpha1"] == 0.5

    def test_cumulative_scale(self):
        sim = generate(ScenarioConfig(case="case1", wiv="cumulative", n=5, seed=1))
        assert sim.truth["log_scale"] == -8.0

    def test_wrong_case(self):
        with pytest.raises(ValueError):
            generate_case1(ScenarioConfig(case="case2", n=5))


class TestCase2:
    def test_schedule_and_horizon(self):
        sim = generate(ScenarioConfig(case="case2", n=40, seed=42))
        assert (sim.survival["exit"] <= 6.0).all()
        assert np.isin(sim.longitudinal["time"].round(10), CASE2_VISITS.round(10)).all()
        assert sim.truth["sigma2_e"] == 0.16

    def test_zero_random_effects_share_mean(self):
        sim = generate(ScenarioConfig(case="case2", n=10, seed=3,
                                      overrides=ScenarioOverrides(zero_random_effects=True)))
        t = sim.longitudinal["time"].to_numpy()
        np.testing.assert_allclose(sim.true_mean, case2_mu(np.array([1.25, 6.0, 1.0]), t))


class TestCase3:
    def test_fixture_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_fixture(None)
        with pytest.raises(ConfigError):
            load_fixture(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_fixture(bad)
        other = tmp_path / "other.json"
        other.write_text('{"kind": "something"}', encoding="utf-8")
        with pytest.raises(ConfigError):
            load_fixture(other)

    def test_delayed_entry_and_covariates(self):
        sim = generate(ScenarioConfig(case="case3", n=40, seed=42, fixture=str(FIXTURE)))
        surv = sim.survival
        assert (surv["entry"] > 0).all()
        assert (surv["exit"] >= surv["entry"]).all()
        assert (surv["exit"] <= 32.0).all()
        np.testing.assert_allclose(surv["cov3"], surv["entry"] / 10.0)
        first = sim.longitudinal.groupby("subject")["time"].min()
        np.testing.assert_allclose(first.to_numpy(), surv.set_index("subject").loc[first.index, "entry"].to_numpy())
        assert set(sim.truth) >= {"beta_L[1]", "gamma[3]", "alpha1", "alpha2", "sigma2_e"}

    def test_requires_fixture(self):
        with pytest.raises(ValueError):
            ScenarioConfig(case="case3", n=5)


@pytest.mark.slow
class TestGeneratorCalibration:
    @pytest.mark.parametrize("case, max_visits", [("case1", 21), ("case2", 14)])
    def test_regular_schedule_cases(self, case, max_visits):
        sim = generate(ScenarioConfig(case=case, n=1000, seed=42))
        assert abs(sim.censoring_rate - 0.40) <= 0.05
        visits = sim.visits_per_subject()
        assert len(visits) == 1000
        assert visits.min() >= 1
        assert visits.max() <= max_visits

    def test_delayed_entry_case(self):
        sim = generate(ScenarioConfig(case="case3", n=3282, seed=42, fixture=str(FIXTURE)))
        assert abs(sim.censoring_rate - 0.70) <= 0.05
        visits = sim.visits_per_subject()
        assert len(visits) == 3282
        assert abs(visits.median() - 9) <= 2
