"""Scenario configuration: strict YAML schema, validation and model construction."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .chain import ROW_TOL, RegimeGenerator
from .model import ControlPolicy, ControlSet, ModelSpec, constant_policy, regime_policy
from .models import example1, example2, expression_model, linear_quadratic

DEFAULT_EPS = [2.0**-k for k in range(3, 9)]
COMMANDS = ("simulate", "solve-bsde", "adjoints", "check-mp", "rates", "recursive", "hjb", "example1", "example2")


class ConfigError(ValueError):
    """Invalid scenario configuration; `field` is a dotted path into the document."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    """Model selector. Builtins take their own parameters; `custom` takes expression strings."""

    name: Literal["example1", "example2", "linear_quadratic", "custom"] = "example1"
    sigma: Optional[List[float]] = None
    gamma: Optional[List[List[float]]] = None
    beta: float = 0.0
    nu: Optional[List[float]] = None
    A: Optional[List[List[float]]] = None
    lq: Optional[Dict[str, Union[float, List[float], List[List[float]]]]] = None
    expressions: Optional[Dict[str, Union[str, List[str]]]] = None
    constants: Dict[str, Union[float, List[float]]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _parameters_match_name(self):
        if self.name == "custom" and not self.expressions:
            raise ValueError("custom model needs `expressions`")
        if self.name != "custom" and self.expressions is not None:
            raise ValueError("`expressions` is only valid for the custom model")
        if self.name == "linear_quadratic" and self.lq is None:
            raise ValueError("linear_quadratic model needs `lq` parameters")
        return self


class ControlSetConfig(_Strict):
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    points: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _one_kind(self):
        box = self.lower is not None or self.upper is not None
        if box == (self.points is not None):
            raise ValueError("give either lower/upper (box) or points (finite set)")
        if box:
            if self.lower is None or self.upper is None or len(self.lower) != len(self.upper):
                raise ValueError("box needs lower and upper of equal length")
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("box needs lower <= upper")
        elif not self.points:
            raise ValueError("finite control set must be non-empty")
        return self

    def build(self) -> ControlSet:
        if self.points is not None:
            return ControlSet.finite(self.points)
        return ControlSet.box(self.lower, self.upper)


class PolicyConfig(_Strict):
    kind: Literal["constant", "regime"] = "constant"
    value: List[float] = Field(default_factory=lambda: [0.0])
    values: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _values_for_regime(self):
        if self.kind == "regime" and not self.values:
            raise ValueError("regime policy needs `values` (one control per regime)")
        return self


class RegressionConfig(_Strict):
    degree: int = Field(3, ge=0, le=6)
    picard: int = Field(1, ge=0, le=5)


class ChecksConfig(_Strict):
    mp_tolerance: float = Field(0.02, gt=0)
    mp_threshold: float = Field(0.99, gt=0, le=1)
    per_time: int = Field(100, ge=1)
    control_points: int = Field(101, ge=2)
    adjoint_tolerance: float = Field(0.02, gt=0)
    adjoint_targets: Optional[Dict[Literal["p", "q", "s", "P", "Q", "S"], float]] = None
    duality_tolerance: float = Field(0.05, gt=0)
    variational_inequality: bool = False
    vi_tolerance: float = Field(0.05, ge=0)
    random_policies: int = Field(20, ge=0)
    dominance_paths: Optional[int] = Field(None, ge=2)


class ProbeConfig(_Strict):
    tau: float = Field(..., ge=0)
    v: List[float]


class SpikeConfig(_Strict):
    probes: List[ProbeConfig] = Field(default_factory=lambda: [ProbeConfig(tau=0.25, v=[1.0])])
    eps: List[float] = Field(default_factory=lambda: list(DEFAULT_EPS))
    rates: bool = True

    @field_validator("eps")
    @classmethod
    def _eps_positive(cls, v):
        if len(v) < 2:
            raise ValueError("need at least two spike widths to fit a slope")
        if any(e <= 0 for e in v):
            raise ValueError("spike widths must be positive")
        return v


class HjbConfig(_Strict):
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    dx: float = Field(0.02, gt=0)
    boundary: Literal["quadratic", "linear"] = "quadratic"
    n_steps: Optional[int] = Field(None, ge=1)
    mc_paths: int = Field(20000, ge=2)
    mc_steps: int = Field(200, ge=1)
    tolerance: float = Field(5e-3, ge=0)
    argmin_check: bool = True
    argmin_paths: int = Field(10000, ge=2)
    argmin_threshold: float = Field(0.95, gt=0, le=1)

    @model_validator(mode="after")
    def _window(self):
        if (self.x_min is None) != (self.x_max is None):
            raise ValueError("give both x_min and x_max or neither")
        if self.x_min is not None and self.x_min >= self.x_max:
            raise ValueError("x_min must be below x_max")
        return self


class ScenarioConfig(_Strict):
    """Complete description of one reproducible experiment."""

    scenario: str = "scenario"
    model: ModelConfig = Field(default_factory=ModelConfig)
    generator: List[List[float]] = Field(default_factory=lambda: [[-1.0, 1.0], [2.0, -2.0]])
    initial_regime: int = Field(1, ge=1)
    x0: float = 0.0
    horizon: float = Field(1.0, gt=0)
    steps: int = Field(200, ge=1)
    paths: int = Field(10000, ge=2)
    seed: int = Field(0, ge=0)
    control_set: ControlSetConfig = Field(default_factory=lambda: ControlSetConfig(lower=[0.0], upper=[1.0]))
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    checks: ChecksConfig = Field(default_factory=ChecksConfig)
    spike: SpikeConfig = Field(default_factory=SpikeConfig)
    hjb: HjbConfig = Field(default_factory=HjbConfig)
    output: str = "out"

    @field_validator("generator")
    @classmethod
    def _generator_valid(cls, q):
        D = len(q)
        if D == 0:
            raise ValueError("generator must be non-empty")
        for i, row in enumerate(q):
            if len(row) != D:
                raise ValueError(f"row {i + 1} has {len(row)} entries, expected {D}")
            for j, v in enumerate(row):
                if j != i and v < 0:
                    raise ValueError(f"row {i + 1}: off-diagonal entry {j + 1} is negative ({v})")
            scale = max(1.0, max(abs(v) for v in row))
            s = sum(row)
            if abs(s) > ROW_TOL * scale:
                raise ValueError(f"row {i + 1} sums to {s!r}, expected 0")
        return q

    @model_validator(mode="after")
    def _dimensions(self):
        D = len(self.generator)
        if self.initial_regime > D:
            raise ConfigError("initial_regime", f"must be in 1..{D}")
        m = self.model
        for key, val in (("sigma", m.sigma), ("nu", m.nu)):
            if val is not None and len(val) != D:
                raise ConfigError(f"model.{key}", f"needs {D} entries (one per regime)")
        for key, val in (("gamma", m.gamma), ("A", m.A)):
            if val is not None and (len(val) != D or any(len(r) != D for r in val)):
                raise ConfigError(f"model.{key}", f"needs a {D}x{D} matrix")
        if self.policy.kind == "regime" and len(self.policy.values) != D:
            raise ConfigError("policy.values", f"needs {D} rows (one per regime)")
        return self


def _field_path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def parse_config(data: dict) -> ScenarioConfig:
    """Validate a config mapping; raises ConfigError with the first offending field path."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ConfigError:
        raise
    except ValidationError as exc:
        err = exc.errors()[0]
        ctx = err.get("ctx", {}).get("error")
        if isinstance(ctx, ConfigError):
            raise ConfigError(ctx.field, ctx.message) from None
        msg = err["msg"].removeprefix("Value error, ")
        raise ConfigError(_field_path(err["loc"]), msg) from None


def load_config(path: str | Path | None) -> ScenarioConfig:
    """Read a YAML document (or defaults when path is None)."""
    if path is None:
        return ScenarioConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from None
    return parse_config({} if data is None else data)


def dump_config(cfg: ScenarioConfig) -> str:
    """Canonical YAML form; parse(dump(cfg)) == cfg."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- construction


def build_generator(cfg: ScenarioConfig) -> RegimeGenerator:
    return RegimeGenerator(cfg.generator)


def build_model(cfg: ScenarioConfig, generator: RegimeGenerator | None = None) -> ModelSpec:
    g = generator or build_generator(cfg)
    D = g.n_regimes
    m = cfg.model
    U = cfg.control_set.build()
    try:
        if m.name == "example1":
            sigma = m.sigma if m.sigma is not None else [1.0] * D
            return example1(sigma=sigma, gamma=m.gamma, beta=m.beta, control_set=U)
        if m.name == "example2":
            return example2(g, nu=m.nu, A=m.A, control_set=U)
        if m.name == "linear_quadratic":
            return linear_quadratic(dict(m.lq), D, control_set=U)
        return expression_model(dict(m.expressions), D, m.constants, generator=g, control_set=U)
    except (ValueError, KeyError) as exc:
        raise ConfigError("model", str(exc)) from None


def build_policy(cfg: ScenarioConfig, control_set: ControlSet) -> ControlPolicy:
    pc = cfg.policy
    try:
        if pc.kind == "regime":
            return regime_policy(np.asarray(pc.values, dtype=float), control_set)
        return constant_policy(np.asarray(pc.value, dtype=float), control_set)
    except ValueError as exc:
        raise ConfigError("policy", str(exc)) from None
