import pytest

from app.config import (
    ModelConfig,
    RunConfig,
    SamplerConfig,
    Settings,
    config_hash,
    load_run_config,
    parse_run_config,
)
from app.errors import ConfigError


def _write(tmp_path, text: str, name: str = "run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestDefaults:
    def test_model_defaults(self):
        m = ModelConfig()
        assert (m.representation, m.wiv, m.window) == ("pspline", "current", 1.0)
        assert (m.mean_basis, m.raw_basis, m.ortho_pve) == (13, 40, 0.999)

    def test_sampler_defaults(self):
        s = SamplerConfig()
        assert (s.warmup, s.keep, s.max_tree_depth, s.target_accept) == (1000, 1000, 10, 0.8)

    def test_settings_from_environment(self, monkeypatch):
        monkeypatch.setenv("WIVJM_JOBS", "0")
        monkeypatch.setenv("WIVJM_LOG_LEVEL", "DEBUG")
        s = Settings()
        assert s.effective_jobs == 1
        assert s.log_level == "DEBUG"


class TestLoading:
    def test_full_file(self, tmp_path):
        path = _write(tmp_path, """
[model]
representation = "fpca"
wiv = "windowed"
window = 1.0

[hazard]
kind = "spline"

[sampler]
chains = 4
seed = 9

[scenario]
case = "case2"
n = 200
""")
        cfg = load_run_config(path)
        assert cfg.model.representation == "fpca"
        assert cfg.hazard.kind == "spline"
        assert cfg.sampler.chains == 4
        assert cfg.scenario.case == "case2"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "none.toml")

    def test_syntax_error_names_file(self, tmp_path):
        path = _write(tmp_path, "[model\nrepresentation = 1\n")
        with pytest.raises(ConfigError, match="run.toml"):
            load_run_config(path)

    def test_unknown_key_named(self, tmp_path):
        path = _write(tmp_path, "[model]\nrepresentaton = \"fpca\"\n")
        with pytest.raises(ConfigError, match="model.representaton"):
            load_run_config(path)

    @pytest.mark.parametrize("section, body", [
        ("sampler", "target_accept = 1.5"),
        ("sampler", "warmup = 0"),
        ("hazard", "quadrature_nodes = 3"),
        ("model", "window = -1.0"),
        ("model", "representation = \"gp\""),
    ])
    def test_invalid_values(self, tmp_path, section, body):
        path = _write(tmp_path, f"[{section}]\n{body}\n")
        with pytest.raises(ConfigError, match=section):
            load_run_config(path)

    def test_case3_needs_fixture(self):
        with pytest.raises(ConfigError):
            parse_run_config({"scenario": {"case": "case3"}})

    def test_relative_fixture_resolved_next_to_config(self, tmp_path):
        (tmp_path / "gen.json").write_text("{}", encoding="utf-8")
        path = _write(tmp_path, "[scenario]\ncase = \"case3\"\nfixture = \"gen.json\"\n")
        cfg = load_run_config(path)
        assert cfg.scenario.fixture == str(tmp_path / "gen.json")


class TestHash:
    def test_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        assert config_hash(a) == config_hash(b)
        c = parse_run_config({"sampler": {"seed": 2}})
        assert config_hash(c) != config_hash(a)
