"""Experiment configuration: a versioned schema with unknown keys rejected."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import fields as fl
from . import geometry as geo
from .quadrature import DEFAULT_TOL

SCHEMA_VERSION = 1
TOL_ENV = "GAUSSGREEN_TOL"

Command = Literal["trace", "check-gauss-green", "regdist", "reconstruct-flux", "coarea-check", "diagnostics"]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldConfig(Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def known(cls, v):
        if v not in fl.CATALOG:
            raise ValueError(f"unknown field {v!r}; known: {sorted(fl.CATALOG)}")
        return v

    def build(self) -> fl.VectorFieldSpec:
        return fl.catalog(self.name, **self.params)


class PhiConfig(Strict):
    kind: Literal["constant", "affine", "hat", "bump", "plateau"] = "constant"
    value: float = 1.0
    gradient: list[float] | None = None
    center: list[float] | None = None
    radius: float | None = None
    delta: float | None = None

    @model_validator(mode="after")
    def complete(self):
        need = {"affine": ["gradient"], "hat": ["center", "radius"], "bump": ["center", "radius"],
                "plateau": ["delta"]}.get(self.kind, [])
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"phi kind {self.kind!r} needs {missing}")
        return self

    def build(self, dim: int) -> fl.TestFunction:
        if self.kind == "constant":
            return fl.constant(self.value, dim)
        if self.kind == "affine":
            return fl.affine(self.gradient, self.value)
        if self.kind == "hat":
            return fl.hat(self.center, self.radius)
        if self.kind == "bump":
            return fl.bump(self.center, self.radius, self.value)
        return fl.plateau(self.delta)


class GeometricSchedule(Strict):
    start: float = Field(gt=0)
    ratio: float = Field(gt=0, lt=1)
    count: int = Field(ge=1)


class Tolerances(Strict):
    residual: float = Field(1e-3, gt=0)
    quadrature: float | None = Field(None, gt=0)


class OutputConfig(Strict):
    csv: str | None = None
    json_name: str = Field("summary.json", alias="json")


class RegdistConfig(Strict):
    samples: int = Field(10_000, ge=1)
    eps: list[float] = Field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05, 0.025])
    order: int = Field(16, ge=2)
    deformation_eps: float | None = Field(None, gt=0)
    deformation_samples: int = Field(1000, ge=1)


class GridConfig(Strict):
    lo: list[float]
    hi: list[float]
    spacing: float = Field(gt=0)
    exclude: list[tuple[list[float], float]] = Field(default_factory=list)


class FluxConfig(Strict):
    source: Literal["field", "table"] = "field"
    table: str | None = None
    grid: GridConfig
    windows: list[float] = Field(default_factory=lambda: [1 / 16, 1 / 32, 1 / 64])
    rms_limit: float = 0.01
    min_order: float = 1.8

    @model_validator(mode="after")
    def table_path(self):
        if self.source == "table" and not self.table:
            raise ValueError("source 'table' needs a table path")
        return self


class CoareaConfig(Strict):
    eps: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    levels: int = Field(33, ge=3)
    limit: float = 1e-4


class DiagnosticsConfig(Strict):
    probes: list[list[float]] = Field(default_factory=list)
    radii: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.025])
    p: float | None = None
    exclusion_radius: float = 0.0


class ExperimentConfig(Strict):
    schema_version: Literal[1]
    command: Command
    field: FieldConfig | None = None
    set: dict[str, Any] | None = None
    phi: PhiConfig = Field(default_factory=PhiConfig)
    schedule: list[float] | GeometricSchedule | None = None
    resolution: float = Field(1 / 256, gt=0)
    side: Literal["interior", "exterior", "compact"] = "interior"
    tolerances: Tolerances = Field(default_factory=Tolerances)
    output: OutputConfig = Field(default_factory=OutputConfig)
    regdist: RegdistConfig = Field(default_factory=RegdistConfig)
    flux: FluxConfig | None = None
    coarea: CoareaConfig = Field(default_factory=CoareaConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)

    @field_validator("schedule")
    @classmethod
    def decreasing(cls, v):
        if isinstance(v, list):
            if not v:
                raise ValueError("schedule is empty")
            if any(x <= 0 for x in v):
                raise ValueError("schedule values must be positive")
            if any(b >= a for a, b in zip(v, v[1:])):
                raise ValueError("schedule must be strictly decreasing")
        return v

    @field_validator("set")
    @classmethod
    def descriptor(cls, v):
        if v is not None:
            try:
                geo.from_dict(v)
            except (geo.ConfigurationError, ValueError, TypeError) as exc:
                raise ValueError(str(exc)) from None
        return v

    @model_validator(mode="after")
    def required_parts(self):
        need = {
            "trace": ["field", "set", "schedule"],
            "check-gauss-green": ["field", "set", "schedule"],
            "regdist": ["set"],
            "reconstruct-flux": ["flux"],
            "coarea-check": ["set"],
            "diagnostics": ["field", "set", "schedule"],
        }[self.command]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"command {self.command!r} needs {missing}")
        if self.command == "reconstruct-flux" and self.flux.source == "field" and self.field is None:
            raise ValueError("flux source 'field' needs a field")
        return self

    def build_set(self) -> geo.SetDescriptor:
        return geo.from_dict(self.set)

    def build_schedule(self) -> geo.EpsilonSchedule:
        s = self.schedule
        if isinstance(s, GeometricSchedule):
            return geo.EpsilonSchedule.geometric(s.start, s.ratio, s.count)
        return geo.EpsilonSchedule(list(s))

    def quadrature_tol(self) -> float:
        if self.tolerances.quadrature is not None:
            return self.tolerances.quadrature
        env = os.environ.get(TOL_ENV)
        return float(env) if env else DEFAULT_TOL


class ConfigError(ValueError):
    """Validation failure carrying the dotted path of each offending key."""


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
