from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings

from app.errors import ConfigError


class Settings(BaseSettings):
    jobs: int = 1
    log_level: str = "INFO"
    gram_cache_size: int = 64
    fixture_dir: str = "fixtures"

    model_config = {"env_file": ".env", "env_prefix": "WIVJM_", "extra": "ignore"}

    @property
    def effective_jobs(self) -> int:
        return max(1, self.jobs)


settings = Settings()


# ── Run configuration (TOML) ────────────────────────────────────────

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    representation: Literal["rspline", "pspline", "fpca", "smre"] = "pspline"
    wiv: Literal["current", "cumulative", "windowed"] = "current"
    window: float = Field(1.0, gt=0)
    rspline_knots: Literal["midpoint", "quantiles3"] = "midpoint"
    mean_basis: int = Field(13, ge=5)         # M
    raw_basis: int = Field(40, ge=10)         # K0
    ortho_grid: int = Field(401, ge=50)
    ortho_pve: float = Field(0.999, gt=0, le=1)
    fpca_grid: int = Field(51, ge=11)
    fpca_pve: float = Field(0.999, gt=0, le=1)
    longitudinal_covariates: Optional[list[str]] = None
    survival_covariates: Optional[list[str]] = None


class HazardConfig(_Section):
    kind: Literal["weibull", "spline"] = "weibull"
    quadrature_nodes: int = Field(15, ge=7)
    knot_quantile: float = Field(0.5, gt=0, lt=1)


class PriorConfig(_Section):
    fixed_sd: float = Field(10.0, gt=0)
    ig_shape: float = Field(0.01, gt=0)
    ig_scale: float = Field(0.01, gt=0)
    tau_beta_shape: float = Field(0.01, gt=0)
    tau_beta_rate: float = Field(0.01, gt=0)
    ridge: float = Field(1e-6, gt=0)
    local_scale_sd: float = Field(5.0, gt=0)
    global_shape: float = Field(2.0, gt=0)
    global_rate: float = Field(1.0, gt=0)
    weibull_shape_scale: float = Field(1.0, gt=0)
    hazard_coef_sd: float = Field(10.0, gt=0)


class SamplerConfig(_Section):
    chains: int = Field(2, ge=1)
    warmup: int = Field(1000, ge=1)
    keep: int = Field(1000, ge=1)
    max_tree_depth: int = Field(10, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)
    seed: int = 1
    save_subject_effects: bool = False


class ScenarioOverrides(_Section):
    gamma: Optional[float] = None
    alpha1: Optional[float] = None
    alpha2: Optional[float] = None
    log_scale: Optional[float] = None
    shape: Optional[float] = None
    sigma2_e: Optional[float] = None
    zero_random_effects: bool = False


class ScenarioConfig(_Section):
    case: Literal["case1", "case2", "case3"] = "case1"
    wiv: Literal["current", "cumulative"] = "current"
    n: int = Field(1000, ge=1)
    seed: int = 7
    null_alpha2: bool = False
    fixture: Optional[str] = None
    overrides: ScenarioOverrides = Field(default_factory=ScenarioOverrides)

    @model_validator(mode="after")
    def _case3_needs_fixture(self) -> "ScenarioConfig":
        if self.case == "case3" and not self.fixture:
            raise ValueError("case3 requires a fixture path")
        return self


class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    hazard: HazardConfig = Field(default_factory=HazardConfig)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    scenario: Optional[ScenarioConfig] = None


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"key '{key}': {err['msg']}")
    return "; ".join(parts)


def parse_run_config(data: dict, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation_error(e)}") from e


def load_run_config(path: str | Path) -> RunConfig:
    """Read a TOML run file; every error names the file and the key or line."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    cfg = parse_run_config(data, source=str(path))
    scenario = cfg.scenario
    if scenario is not None and scenario.fixture:
        fixture = Path(scenario.fixture)
        if not fixture.is_absolute() and not fixture.exists():
            for candidate in (path.parent / fixture, Path(settings.fixture_dir) / fixture.name):
                if candidate.exists():
                    scenario.fixture = str(candidate)
                    break
    return cfg


def config_hash(cfg: BaseModel) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
