"""Run configuration: strict YAML/JSON parsing and model assembly.

Unknown keys are rejected and every violation is reported at once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import models
from .levy import (LevyMeasure, build_partition, empty_partition, power_law_measure, table_measure,
                   tempered_measure)
from .paths import ModelCoefficients, TimeGrid
from .solver import SolverConfig


class ConfigError(ValueError):
    """All violations found in a config file."""

    def __init__(self, violations: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Component(_Strict):
    name: str
    params: Dict[str, Any] = Field(default_factory=dict)


class LevyBlock(_Strict):
    kind: Literal["power_law", "tempered", "table"] = "power_law"
    alpha: Optional[float] = 0.5
    c: float = 1.0
    c_neg: Optional[float] = None
    r_max: Optional[float] = None  # power law: 1, tempered: unbounded
    rate: float = 1.0
    edges: Optional[List[float]] = None
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "table":
            if not self.edges or not self.values or len(self.edges) != len(self.values) + 1:
                raise ValueError("table measure needs edges (n+1) and values (n)")
        elif self.alpha is None or not 0.0 < self.alpha < 2.0:
            raise ValueError("alpha must lie in (0, 2)")
        if self.r_max is not None and self.r_max <= 0:
            raise ValueError("r_max must be positive")
        return self


class ManufacturedBlock(_Strict):
    solution: Literal["sine", "linear"] = "sine"
    speed: float = 0.5
    freq: float = 1.0
    kappa: float = 0.5
    against: Literal["full", "truncated"] = "full"
    x_range: List[float] = Field(default_factory=lambda: [-4.0, 6.0])
    n_grid: int = 2001


class ModelBlock(_Strict):
    q: int = Field(1, ge=1)
    d: Optional[int] = None
    levy: LevyBlock = Field(default_factory=LevyBlock)
    drift: Component = Field(default_factory=lambda: Component(name="zero"))
    sigma: Component = Field(default_factory=lambda: Component(name="constant", params={"value": 0.3}))
    beta: Component = Field(default_factory=lambda: Component(name="additive"))
    gamma: Component = Field(default_factory=lambda: Component(name="min1"))
    terminal: Component = Field(default_factory=lambda: Component(name="sum"))
    driver: Component = Field(default_factory=lambda: Component(name="zero"))
    manufactured: Optional[ManufacturedBlock] = None
    x0: List[float] = Field(default_factory=lambda: [1.0])

    @model_validator(mode="after")
    def _check(self):
        problems = []
        for kind, table, comp in (("drift", models.DRIFTS, self.drift), ("sigma", models.SIGMAS, self.sigma),
                                  ("beta", models.BETAS, self.beta), ("gamma", models.GAMMAS, self.gamma),
                                  ("terminal", models.TERMINALS, self.terminal),
                                  ("driver", models.DRIVERS, self.driver)):
            if comp.name not in table:
                problems.append(f"{kind}.name '{comp.name}' unknown (known: {', '.join(sorted(table))})")
        if len(self.x0) != self.q:
            problems.append(f"x0 has {len(self.x0)} entries, q = {self.q}")
        if self.d is not None and self.d < 1:
            problems.append("d must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class NumericsBlock(_Strict):
    T: float = Field(1.0, gt=0)
    N: int = Field(20, ge=1)
    epsilon: float = Field(0.05, gt=0)
    zeta: int = 1
    h: float = Field(0.5, gt=0)
    r_work: Optional[float] = None
    batch: int = Field(8192, ge=1)
    forward_jumps: Literal["exact", "representative"] = "exact"
    finite_activity: bool = False

    @field_validator("zeta")
    @classmethod
    def _zeta(cls, v):
        if v not in (0, 1):
            raise ValueError("zeta must be 0 or 1")
        return v


class TrainingBlock(_Strict):
    epochs: int = Field(200, ge=0)
    lr: float = Field(3e-3, gt=0)
    minibatch: int = Field(512, ge=1)
    hidden: Optional[int] = Field(None, ge=1)
    layers: int = Field(3, ge=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    warm_start: bool = True
    resample: bool = False
    resample_batch: Optional[int] = None


class RatesBlock(_Strict):
    epsilons: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    reference_epsilon: Optional[float] = None
    batch: int = Field(100_000, ge=1)
    N: int = Field(10, ge=1)
    block: int = Field(10_000, ge=1)


class ProjectionsBlock(_Strict):
    N: int = Field(10, ge=1)
    substeps: int = Field(20, ge=1)
    batch: int = Field(20_000, ge=1)


class OracleBlock(_Strict):
    degree: int = Field(3, ge=0)
    ridge: float = Field(1e-8, ge=0)
    rates: RatesBlock = Field(default_factory=RatesBlock)
    projections: ProjectionsBlock = Field(default_factory=ProjectionsBlock)


class RunConfig(_Strict):
    model: ModelBlock = Field(default_factory=ModelBlock)
    numerics: NumericsBlock = Field(default_factory=NumericsBlock)
    training: TrainingBlock = Field(default_factory=TrainingBlock)
    oracle: OracleBlock = Field(default_factory=OracleBlock)
    seed: int = 0
    output: str = "out"

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()[:16]

    def echo(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _format_errors(err: ValidationError) -> List[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        out.append(f"{loc}: {msg}")
    return out


def config_from_dict(data: dict) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None
    r_max = measure_from_config(cfg).r_max
    if cfg.numerics.epsilon >= r_max:
        warnings.warn(f"epsilon={cfg.numerics.epsilon} >= R_max={r_max}: truncation removes all jumps",
                      UserWarning, stacklevel=2)
        cfg.numerics.finite_activity = True
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a YAML (or JSON) config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: file not found"])
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError([f"{path}: malformed YAML ({err})"]) from None
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# assembly


def measure_from_config(cfg: RunConfig) -> LevyMeasure:
    lv, q = cfg.model.levy, cfg.model.q
    if lv.kind == "power_law":
        return power_law_measure(lv.alpha, lv.c, 1.0 if lv.r_max is None else lv.r_max, q, lv.c_neg)
    if lv.kind == "tempered":
        return tempered_measure(lv.alpha, lv.c, lv.rate, math.inf if lv.r_max is None else lv.r_max, q)
    return table_measure(lv.edges, lv.values, q)


def grid_from_config(cfg: RunConfig) -> TimeGrid:
    return TimeGrid.uniform(cfg.numerics.T, cfg.numerics.N)


def partition_from_config(cfg: RunConfig, measure: LevyMeasure = None):
    measure = measure or measure_from_config(cfg)
    nm = cfg.numerics
    if nm.finite_activity:
        return empty_partition(measure, nm.epsilon, nm.h)
    gfun, _ = models.GAMMAS[cfg.model.gamma.name](cfg.model.q, **cfg.model.gamma.params)
    return build_partition(measure, nm.epsilon, nm.h, nm.r_work, gamma=gfun)


def coefficients_from_config(cfg: RunConfig, measure: LevyMeasure = None, grid: TimeGrid = None):
    """Model coefficients; with a manufactured block also returns the exact solution."""
    m, nm = cfg.model, cfg.numerics
    d = m.d if m.d is not None else m.q
    kw = dict(drift=m.drift.name, drift_params=m.drift.params, sigma=m.sigma.name, sigma_params=m.sigma.params,
              beta=m.beta.name, beta_params=m.beta.params, gamma=m.gamma.name, gamma_params=m.gamma.params,
              terminal=m.terminal.name, terminal_params=m.terminal.params)
    if m.manufactured is None:
        return models.build_coefficients(m.q, d, nm.zeta, driver=m.driver.name, driver_params=m.driver.params,
                                         name="config", **kw), None
    from .reference import linear_solution, manufactured_driver, sine_solution
    mf = m.manufactured
    measure = measure or measure_from_config(cfg)
    grid = grid or grid_from_config(cfg)
    if mf.solution == "sine":
        u_star = sine_solution(mf.speed, mf.freq)
        kw["terminal"], kw["terminal_params"] = "sine", {"freq": mf.freq, "phase": mf.speed * nm.T}
    else:
        u_star = linear_solution(1.0)
        kw["terminal"], kw["terminal_params"] = "sum", {}
    base = models.build_coefficients(m.q, d, nm.zeta, name="manufactured", **kw)
    eps, zeta = (0.0, 0) if mf.against == "full" else (nm.epsilon, nm.zeta)
    drv = manufactured_driver(u_star, base, measure, mf.kappa, eps, zeta, times=grid.nodes,
                              x_range=mf.x_range, n_grid=mf.n_grid)
    return dataclasses.replace(base, driver=drv), u_star


def solver_config(cfg: RunConfig) -> SolverConfig:
    t = cfg.training
    return SolverConfig(epochs=t.epochs, minibatch=t.minibatch, lr=t.lr, hidden=t.hidden, layers=t.layers,
                        val_fraction=t.val_fraction, warm_start=t.warm_start, resample=t.resample,
                        resample_batch=t.resample_batch)


def x0_from_config(cfg: RunConfig) -> np.ndarray:
    return np.asarray(cfg.model.x0, dtype=float)
