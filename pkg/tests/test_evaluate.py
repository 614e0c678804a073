"""PSIS-LOO, model comparison and replication bias / coverage tables."""

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.special import logsumexp

from app.evaluate import (
    LooResult,
    ReplicationResult,
    bias_cp_table,
    bias_cp_wide,
    compare_models,
    looic_long_table,
    psis_smooth,
    relative_efficiency,
    survival_loo,
    to_inference_data,
)


def _loglik(rng: np.random.Generator, draws: int = 2000, subjects: int = 40, spread: float = 0.1) -> np.ndarray:
    centre = rng.normal(-2.0, 0.5, size=subjects)
    return centre + spread * rng.normal(size=(draws, subjects))


class TestPareto:
    def test_tail_shape_agrees_with_maximum_likelihood(self):
        rng = np.random.default_rng(42)
        ratios = stats.genpareto.rvs(c=0.3, scale=1.0, size=10_000, random_state=rng)
        log_ratios = np.log(ratios)
        _, k = psis_smooth(log_ratios)
        x = np.sort(log_ratios - log_ratios.max())
        cutoff = x[-301]
        exceed = np.exp(x[x > cutoff]) - np.exp(cutoff)
        k_ml, _, _ = stats.genpareto.fit(exceed, floc=0.0)
        assert abs(k - k_ml) < 0.1
        assert abs(k - 0.3) < 0.25

    def test_smoothed_weights_normalized(self):
        rng = np.random.default_rng(42)
        lw, k = psis_smooth(rng.normal(size=1000))
        np.testing.assert_allclose(logsumexp(lw), 0.0, atol=1e-12)
        assert k < 0.7

    def test_heavy_tail_detected(self):
        rng = np.random.default_rng(42)
        _, k = psis_smooth(1.5 * rng.exponential(size=4000))
        assert k > 0.7

    def test_degenerate_inputs(self):
        _, k = psis_smooth(np.array([0.3]))
        assert k == np.inf
        lw, k = psis_smooth(np.zeros(10))
        assert k == np.inf
        np.testing.assert_allclose(np.exp(lw), np.full(10, 0.1))


class TestInferenceData:
    def test_layout(self):
        rng = np.random.default_rng(42)
        idata = to_inference_data(_loglik(rng, draws=200).reshape(2, 100, 40), rng.normal(size=(2, 100, 2)),
                                  ["alpha1", "alpha2"])
        assert set(idata.posterior.data_vars) == {"alpha1", "alpha2"}
        assert idata.log_likelihood["survival"].shape == (2, 100, 40)

    def test_mismatches_rejected(self):
        ll = np.zeros((2, 100, 5))
        with pytest.raises(ValueError):
            to_inference_data(ll, np.zeros((2, 90, 1)), ["a"])
        with pytest.raises(ValueError):
            to_inference_data(ll, np.zeros((2, 100, 2)), ["a"])
        with pytest.raises(ValueError):
            to_inference_data(np.zeros(5))

    def test_relative_efficiency(self):
        rng = np.random.default_rng(42)
        ll = np.zeros((4, 500, 3))
        assert relative_efficiency(to_inference_data(ll)) == 1.0
        assert relative_efficiency(to_inference_data(ll[:1], rng.normal(size=(1, 500, 1)), ["a"])) == 1.0
        iid = relative_efficiency(to_inference_data(ll, rng.normal(size=(4, 500, 2)), ["a", "b"]))
        assert 0.8 < iid < 1.2


class TestExactLeaveOneOut:
    """Normal mean with known unit variance and a N(0, 10²) prior: every fold has a closed form."""

    def test_matches_refit_predictive_density(self):
        rng = np.random.default_rng(42)
        n, prior_var = 20, 100.0
        y = rng.normal(0.5, 1.0, size=n)
        precision = 1.0 / prior_var + n
        theta = rng.normal(y.sum() / precision, np.sqrt(1.0 / precision), size=(4, 1000))
        ll = stats.norm.logpdf(y[None, None, :], loc=theta[:, :, None], scale=1.0)

        loo = survival_loo(to_inference_data(ll, theta[:, :, None], ["theta"]))

        fold_precision = 1.0 / prior_var + (n - 1)
        fold_mean = (y.sum() - y) / fold_precision
        exact = stats.norm.logpdf(y, loc=fold_mean, scale=np.sqrt(1.0 + 1.0 / fold_precision))
        np.testing.assert_allclose(loo.pointwise, exact, atol=0.02)
        np.testing.assert_allclose(loo.elpd, exact.sum(), rtol=0.05)
        assert loo.status == "ok"
        in_sample = float(np.sum(logsumexp(ll.reshape(-1, n), axis=0) - np.log(ll.shape[0] * ll.shape[1])))
        assert loo.elpd <= in_sample


class TestSurvivalLoo:
    def test_close_to_raw_importance_sampling(self):
        ll = _loglik(np.random.default_rng(42))
        loo = survival_loo(ll)
        raw = -(logsumexp(-ll, axis=0) - np.log(ll.shape[0]))
        np.testing.assert_allclose(loo.pointwise, raw, atol=1e-3)
        assert loo.status == "ok"
        assert loo.p_loo >= 0
        np.testing.assert_allclose(loo.looic, -2.0 * loo.elpd)

    def test_accepts_chain_axis(self):
        ll = _loglik(np.random.default_rng(42), draws=1000)
        flat = survival_loo(ll)
        stacked = survival_loo(ll.reshape(2, 500, -1))
        np.testing.assert_allclose(stacked.elpd, flat.elpd)

    def test_single_draw_is_its_own_estimate(self):
        ll = np.array([[-1.0, -2.5, -0.3]])
        loo = survival_loo(ll)
        np.testing.assert_array_equal(loo.pointwise, ll[0])
        assert loo.p_loo == 0.0
        assert np.all(np.isinf(loo.pareto_k))

    def test_to_dict_keys(self):
        loo = survival_loo(_loglik(np.random.default_rng(1)), subject_ids=np.arange(40))
        d = loo.to_dict()
        assert set(d) >= {"looic", "looic_se", "elpd_loo", "p_loo", "max_pareto_k", "status"}
        assert d["looic_se"] == pytest.approx(2.0 * loo.elpd_se)

    def test_rejects_bad_arrays(self):
        with pytest.raises(ValueError):
            survival_loo(np.zeros(10))
        ll = np.zeros((10, 3))
        ll[2, 1] = np.nan
        with pytest.raises(ValueError):
            survival_loo(ll)

    def test_status_levels(self):
        base = dict(elpd=0.0, elpd_se=0.0, p_loo=0.0, pointwise=np.zeros(3))
        assert LooResult(pareto_k=np.array([0.1, 0.5, 0.6]), **base).status == "ok"
        assert LooResult(pareto_k=np.array([0.1, 0.8, 0.6]), **base).status == "warn"
        assert LooResult(pareto_k=np.array([0.1, 1.2, 0.6]), **base).status == "unreliable"


class TestCompareModels:
    def test_difference_and_ranks(self):
        rng = np.random.default_rng(42)
        ll = _loglik(rng)
        good = survival_loo(ll)
        bad = survival_loo(ll - 0.5)
        table = compare_models({"good": good, "bad": bad})
        row = table.iloc[0]
        np.testing.assert_allclose(row["looic_diff"], good.looic - bad.looic)
        assert row["looic_diff"] < 0
        assert (row["rank_a"], row["rank_b"]) == (1, 2)

    def test_mismatched_subjects(self):
        rng = np.random.default_rng(42)
        a = survival_loo(_loglik(rng, subjects=10))
        b = survival_loo(_loglik(rng, subjects=12))
        with pytest.raises(ValueError):
            compare_models({"a": a, "b": b})
        with pytest.raises(ValueError):
            compare_models({"a": a})


class TestReplication:
    def _results(self):
        return [
            ReplicationResult(1, "pspline", {"alpha2": (0.35, 0.1, 0.6)}, looic=100.0),
            ReplicationResult(2, "pspline", {"alpha2": (0.25, 0.1, 0.29)}, looic=102.0),
            ReplicationResult(1, "fpca", {"alpha2": (0.30, 0.2, 0.4)}),
            ReplicationResult(2, "fpca", {"alpha2": (0.40, 0.1, 0.5)}, looic=98.0),
        ]

    def test_bias_and_coverage(self):
        table = bias_cp_table(self._results(), {"alpha2": 0.3})
        ps = table[table["approach"] == "pspline"].iloc[0]
        np.testing.assert_allclose(ps["bias"], 0.0, atol=1e-12)
        assert ps["cp"] == 50.0
        fp = table[table["approach"] == "fpca"].iloc[0]
        np.testing.assert_allclose(fp["bias"], 0.05)
        assert fp["cp"] == 100.0 and fp["replicates"] == 2

    def test_wide_layout(self):
        wide = bias_cp_wide(bias_cp_table(self._results(), {"alpha2": 0.3}))
        assert set(wide.columns) == {"parameter", "bias_fpca", "bias_pspline", "cp_fpca", "cp_pspline",
                                     "replicates_fpca", "replicates_pspline"}

    def test_missing_parameter(self):
        with pytest.raises(ValueError):
            bias_cp_table(self._results(), {"alpha1": 0.2})
        with pytest.raises(ValueError):
            bias_cp_table([], {"alpha2": 0.3})

    def test_interval_order_checked(self):
        with pytest.raises(ValueError):
            ReplicationResult(1, "x", {"a": (0.0, 1.0, -1.0)})

    def test_looic_table_skips_missing(self):
        table = looic_long_table(self._results())
        assert len(table) == 3
        assert set(table["approach"]) == {"pspline", "fpca"}

    def test_from_summary(self):
        summary = pd.DataFrame({"parameter": ["alpha1"], "mean": [0.2], "sd": [0.1],
                                "q2.5": [0.0], "q97.5": [0.4], "rhat": [1.0]})
        r = ReplicationResult.from_summary(3, "smre", summary, {"looic": 10.0, "max_pareto_k": 0.2})
        assert r.estimates == {"alpha1": (0.2, 0.0, 0.4)}
        assert r.looic == 10.0 and r.max_k == 0.2 and r.looic_se is None
