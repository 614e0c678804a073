"""End-to-end CLI runs on a tiny study, plus exit codes for bad inputs."""

import numpy as np
import pandas as pd
import pytest

from app.datastore import read_json, read_manifest
from app.main import build_parser, main
from app.pipeline import derive_seeds

TINY = """
[model]
representation = "{representation}"
wiv = "current"
mean_basis = 6

[hazard]
kind = "weibull"
quadrature_nodes = 7

[sampler]
chains = 2
warmup = 40
keep = 20
max_tree_depth = 5
seed = 5

[scenario]
case = "case1"
n = 20
seed = 3
"""

OK_CODES = (0, 4)


def _config(directory, representation: str):
    path = directory / f"{representation}.toml"
    path.write_text(TINY.format(representation=representation), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    rspline, smre = _config(root, "rspline"), _config(root, "smre")
    codes = {
        "simulate": main(["simulate", "--config", rspline, "--out", str(root / "data"),
                          "--replicates", "2", "--jobs", "1"]),
        "fit_a": main(["fit", "--config", rspline, "--data", str(root / "data"), "--out",
                       str(root / "fits" / "a"), "--label", "rspline", "--jobs", "1"]),
        "fit_b": main(["fit", "--config", smre, "--data", str(root / "data"), "--out",
                       str(root / "fits" / "b"), "--label", "smre", "--jobs", "1"]),
        "loo": main(["loo", "--fit", str(root / "fits" / "a" / "rep_001")]),
        "report": main(["report", "--study", str(root / "fits"), "--out", str(root / "report")]),
    }
    return root, codes


class TestPipeline:
    def test_simulate_writes_replicates(self, study):
        root, codes = study
        assert codes["simulate"] == 0
        for rep in ("rep_001", "rep_002"):
            assert (root / "data" / rep / "longitudinal.csv").exists()
            truth = read_json(root / "data" / rep / "truth.json")
            assert truth["parameters"]["alpha2"] == 0.3
        manifest = read_manifest(root / "data")
        assert manifest.extra["seeds"] == derive_seeds(3, 2)
        first = pd.read_csv(root / "data" / "rep_001" / "survival.csv", comment="#")
        second = pd.read_csv(root / "data" / "rep_002" / "survival.csv", comment="#")
        assert not first.equals(second)

    def test_fit_outputs(self, study):
        root, codes = study
        assert codes["fit_a"] in OK_CODES and codes["fit_b"] in OK_CODES
        fit = root / "fits" / "a" / "rep_001"
        for name in ("draws.csv", "pointwise_loglik.npy", "subjects.npy", "basis.npz", "summary.json",
                     "diagnostics.json", "trajectories.csv", "manifest.json"):
            assert (fit / name).exists(), name
        pointwise = np.load(fit / "pointwise_loglik.npy")
        assert pointwise.shape == (2, 20, 20)
        assert np.all(np.isfinite(pointwise))
        draws = pd.read_csv(fit / "draws.csv", comment="#")
        assert len(draws) == 40
        assert {"alpha1", "alpha2", "sigma2_e", "gamma[1]"} <= set(draws.columns)
        assert read_manifest(fit).extra["replicate"] == 1

    def test_loo(self, study):
        root, codes = study
        assert codes["loo"] == 0
        loo = read_json(root / "fits" / "a" / "rep_001" / "loo.json")
        assert len(loo["pareto_k"]) == 20
        np.testing.assert_allclose(loo["looic"], -2.0 * sum(loo["elpd_pointwise"]))
        assert "loo" in read_manifest(root / "fits" / "a" / "rep_001").extra

    def test_report(self, study):
        root, codes = study
        assert codes["report"] == 0
        bias_cp = pd.read_csv(root / "report" / "bias_cp.csv", comment="#")
        assert {"bias_rspline", "cp_smre"} <= set(bias_cp.columns)
        assert "alpha2" in set(bias_cp["parameter"])
        looic = pd.read_csv(root / "report" / "looic.csv", comment="#")
        assert len(looic) == 4
        comparison = pd.read_csv(root / "report" / "comparison.csv", comment="#")
        assert sorted(comparison["replicate"]) == [1, 2]


class TestExitCodes:
    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model\n", encoding="utf-8")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "x.toml"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "out")]) == 2

    def test_simulate_needs_scenario(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[model]\nrepresentation = \"fpca\"\n", encoding="utf-8")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == 2

    def test_missing_survival_csv(self, tmp_path):
        config = _config(tmp_path, "rspline")
        data = tmp_path / "data"
        data.mkdir()
        (data / "longitudinal.csv").write_text("subject,time,value\n1,0.0,1.0\n", encoding="utf-8")
        assert main(["fit", "--config", config, "--data", str(data), "--out", str(tmp_path / "fit")]) == 3

    def test_missing_data_directory(self, tmp_path):
        config = _config(tmp_path, "rspline")
        assert main(["fit", "--config", config, "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "fit")]) == 3

    def test_loo_without_sidecar(self, tmp_path):
        assert main(["loo", "--fit", str(tmp_path)]) == 3

    def test_report_without_fits(self, tmp_path):
        assert main(["report", "--study", str(tmp_path), "--out", str(tmp_path / "report")]) == 3

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--version"])
        assert exc.value.code == 0
        assert "wivjm" in capsys.readouterr().out
