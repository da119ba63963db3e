"""Experiment configuration: a JSON document validated into typed settings."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .metrics import ConstraintKind, MetricKind, Smoothness, _SMOOTHNESS

SOLVERS = ("fw", "gda", "ellipsoid", "bisection", "split_fw", "con_gda", "con_ellipsoid", "con_bisection")
CONSTRAINED = {"split_fw", "con_gda", "con_ellipsoid", "con_bisection"}

# LMO-call budgets used when a config leaves T unset
DEFAULT_T = {
    "fw": 5000,
    "gda": 5000,
    "ellipsoid": 1000,
    "bisection": 20,
    "split_fw": 10000,
    "con_gda": 10000,
    "con_ellipsoid": 1000,
    "con_bisection": 10,
}


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticData(_Model):
    kind: Literal["Unif", "NormBal", "NormImbal", "ThreeClass2D", "ThreeClass1D", "Custom"]
    priors: list[float] | None = None
    components: list[dict] | None = None

    @model_validator(mode="after")
    def _custom_fields(self):
        if (self.kind == "Custom") != (self.priors is not None and self.components is not None):
            raise ValueError("priors and components are required for Custom and only allowed there")
        return self


class DataConfig(_Model):
    synthetic: SyntheticData | None = None
    csv: str | None = None
    test_csv: str | None = None
    n_samples: int = Field(10_000, ge=1)
    test_samples: int = Field(100_000, ge=1)
    split_fraction: float = Field(2 / 3, gt=0, lt=1)
    n_classes: int | None = Field(None, ge=1)
    n_groups: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ValueError("give exactly one of synthetic or csv")
        return self


class MetricConfig(_Model):
    kind: MetricKind
    default_class: int = Field(0, ge=0)
    coeffs: list[float] | None = None
    numerator: list[float] | None = None
    denominator: list[float] | None = None


class ConstraintConfig(_Model):
    kind: ConstraintKind
    eps: float = 0.01
    tau: float | list[float] | Literal["priors"] | None = None
    target_class: int = Field(0, ge=0)
    coeffs: list[float] | None = None
    bound: float = 0.0

    @model_validator(mode="after")
    def _needs_tau(self):
        if self.kind in (ConstraintKind.CLASS_PRECISION, ConstraintKind.COVERAGE) and self.tau is None:
            raise ValueError(f"{self.kind.value} needs tau")
        if self.kind is ConstraintKind.LINEAR and self.coeffs is None:
            raise ValueError("LinearCustom needs coeffs")
        return self


class SolverConfig(_Model):
    name: Literal["fw", "gda", "ellipsoid", "bisection", "split_fw", "con_gda", "con_ellipsoid", "con_bisection"]
    T: int | None = Field(None, ge=1)
    T_inner: int = Field(1000, ge=1)
    L: float | None = Field(None, gt=0)
    r: float = Field(0.05, gt=0)
    zeta: float = Field(10.0, gt=0)
    a: float = Field(1000.0, gt=0)
    eta: float | None = Field(None, gt=0)
    eta_dual: float | None = Field(None, gt=0)
    tune_steps: bool = True
    step_grid: list[float] = [0.001, 0.01, 0.1]
    eta_schedule: list[float] = Field([0.5, 0.1, 0.001], min_length=3, max_length=3)
    line_search: bool = False
    prune: bool | None = None
    xi_budget: int = Field(1000, ge=1)
    hull_budget: int = Field(1000, ge=1)
    branch: Literal["proof", "printed"] = "proof"

    @property
    def budget(self) -> int:
        return self.T if self.T is not None else DEFAULT_T[self.name]


class LmoConfig(_Model):
    kind: Literal["plugin", "wlr", "exact_eta"] = "plugin"
    layout: Literal["auto", "full", "diagonal"] = "auto"


class CpeSettings(_Model):
    iterations: int = Field(2000, ge=1)
    step: float = Field(0.1, gt=0)
    l2: float = Field(1e-4, ge=0)
    tol: float = Field(1e-7, ge=0)


class OracleSettings(_Model):
    step: float = Field(0.02, gt=0)
    w_max: float = Field(10.0, gt=0)
    n_samples: int = Field(1_000_000, ge=1)
    seed: int = 0
    mix_steps: int = Field(20, ge=1)


class ExperimentConfig(_Model):
    data: DataConfig
    metric: MetricConfig
    constraints: list[ConstraintConfig] = []
    solver: SolverConfig
    lmo: LmoConfig = LmoConfig()
    cpe: CpeSettings = CpeSettings()
    oracle: OracleSettings = OracleSettings()
    seed: int = Field(0, ge=0, lt=2**64)
    n_trials: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        if self.solver.name in CONSTRAINED and not self.constraints:
            raise ValueError(f"solver {self.solver.name} needs at least one constraint")
        if self.solver.name not in CONSTRAINED and self.constraints:
            raise ValueError(f"solver {self.solver.name} does not take constraints")
        if self.lmo.kind == "exact_eta" and self.data.synthetic is None:
            raise ValueError("the exact_eta LMO needs a synthetic data source")
        return self

    def smoothness_problems(self) -> list[str]:
        """Solver and metric combinations without a convergence guarantee."""
        s = _SMOOTHNESS[self.metric.kind]
        name = self.solver.name
        out = []
        if s is None:
            out.append(f"{self.metric.kind.value} can only be evaluated, not optimized")
        elif name in ("fw", "split_fw") and s not in (Smoothness.SMOOTH_CONVEX, Smoothness.LINEAR):
            out.append(f"{name} needs a smooth convex metric, got {s.value}")
        elif name in ("bisection", "con_bisection") and s is not Smoothness.RATIO:
            out.append(f"{name} needs a ratio-of-linear metric, got {s.value}")
        elif name not in ("bisection", "con_bisection") and s is Smoothness.RATIO:
            out.append(f"{name} needs a convex metric, got {s.value}")
        return out


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config(raw: dict, allow_mismatch: bool = False) -> ExperimentConfig:
    """Validate a config mapping; errors carry the dotted path of the offending field."""
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{_field_path(e)}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config\n  " + "\n  ".join(lines)) from None
    problems = cfg.smoothness_problems()
    if problems and not allow_mismatch:
        raise ConfigError("solver.name: " + "; ".join(problems) + " (pass --allow-mismatch to run anyway)")
    return cfg


def load_config(path, allow_mismatch: bool = False) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw, allow_mismatch)


def resolved(cfg: ExperimentConfig) -> dict:
    """The config with every default filled in, as plain JSON data."""
    return cfg.model_dump(mode="json")
