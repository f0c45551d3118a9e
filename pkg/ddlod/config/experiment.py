"""Experiment descriptions: pydantic models read from flat key=value files.

A file looks like

    # oscillatory example
    nh=320
    nH=10
    coeff.kind=oscillatory
    coeff.eps=0.025
    phi1=-0.005,-0.01,0
    phi2=-0.005,0,0.0007

Dotted keys address nested sections; CLI flags and `--set key=value`
override file keys.
"""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ddlod.core.assembly import AffineFunction, q_rho_project
from ddlod.core.grid import StructuredMesh
from ddlod.core.lod import MIN_REFINEMENT
from ddlod.exceptions import ConfigError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)


class CoefficientSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str = Field(default="identity", description="identity, heterogeneous, oscillatory or file")
    seed: int = Field(default=1, ge=0, description="Seed of the heterogeneous field")
    eps: float = Field(default=0.025, gt=0, description="Oscillation period of the oscillatory field")
    blocks: int = Field(default=40, ge=1, description="Blocks per direction of the heterogeneous field")
    lo: float = Field(default=1.0, gt=0, description="Lower end of the heterogeneous values")
    hi: float = Field(default=1350.0, gt=0, description="Upper end of the heterogeneous values")
    path: Optional[str] = Field(default=None, description="Field file when kind=file")

    @field_validator("kind")
    @classmethod
    def check_kind(cls, value: str) -> str:
        value = value.lower()
        if value not in ("identity", "heterogeneous", "oscillatory", "file"):
            raise ValueError(f"unknown coefficient kind {value!r}")
        return value

    @model_validator(mode="after")
    def check_consistency(self) -> "CoefficientSpec":
        if self.hi < self.lo:
            raise ValueError(f"hi={self.hi} is below lo={self.lo}")
        if self.kind == "file" and not self.path:
            raise ValueError("kind=file needs coeff.path")
        return self


class SpaceKind(str, Enum):
    FINE = "fine"
    MULTISCALE = "multiscale"


class SweepParam(str, Enum):
    H = "H"
    RHO = "rho"


class SweepMode(str, Enum):
    OCP = "ocp"
    ELLIPTIC = "elliptic"


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    param: SweepParam = Field(default=SweepParam.H, description="H (with rho=H) or rho (at fixed H)")
    values: List[int] = Field(default_factory=list, description="Denominators of the swept mesh sizes")
    mode: SweepMode = Field(default=SweepMode.OCP, description="ocp or elliptic (state equation with f=1)")

    @field_validator("values", mode="before")
    @classmethod
    def split_values(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.replace(" ", "").split(",") if v]
        return value


def _affine(value) -> AffineFunction:
    if isinstance(value, AffineFunction):
        return value
    if isinstance(value, dict):
        return AffineFunction(**value)
    if isinstance(value, (int, float)):
        return AffineFunction(float(value))
    return AffineFunction.parse(value)


class ExperimentConfig(BaseModel):
    """One experiment: meshes, coefficient, control problem and outputs"""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    name: str = Field(default="experiment", description="Label written to result.csv")
    nh: int = Field(default=64, ge=2, description="Fine mesh denominator (h = 1/nh)")
    nH: int = Field(default=8, ge=2, description="Coarse mesh denominator (H = 1/nH)")
    nrho: Optional[int] = Field(default=None, ge=1, description="Control mesh denominator, defaults to nH")
    space: SpaceKind = Field(default=SpaceKind.MULTISCALE, description="State space of the solve")
    k: Optional[int] = Field(default=None, ge=1, description="Corrector iterations; overrides j")
    j: int = Field(default=3, ge=1, description="k = ceil(j ln(1/H)) when k is not given")
    gamma: float = Field(default=1.0, gt=0, description="Regularization parameter")
    coeff: CoefficientSpec = Field(default_factory=CoefficientSpec)
    y_d: Union[float, str] = Field(default=1.0, description="Constant target state or path to nodal values")
    phi1: AffineFunction = Field(default=AffineFunction(-1.0), description="Lower bound c0,c1,c2")
    phi2: AffineFunction = Field(default=AffineFunction(1.0), description="Upper bound c0,c1,c2")
    method: str = Field(default="pdas", description="pdas or projected_gradient")
    tol: float = Field(default=1e-10, gt=0, description="Optimizer stopping tolerance")
    max_iter: int = Field(default=50, ge=1, description="Optimizer iteration cap")
    reference: bool = Field(default=False, description="Also solve on the fine space and report errors")
    active_sets: bool = Field(default=True, description="Write active_lo.csv / active_hi.csv")
    output: str = Field(default="results", description="Output directory")
    cache: Optional[str] = Field(default=None, description="Basis cache directory, settings.cache_dir if unset")
    rebuild: bool = Field(default=False, description="Discard an unreadable cached basis and rebuild it")
    sweep: SweepSpec = Field(default_factory=SweepSpec)

    @field_validator("phi1", "phi2", mode="before")
    @classmethod
    def parse_affine(cls, value):
        try:
            return _affine(value)
        except ValueError as exc:
            raise ValueError(str(exc))

    @field_validator("y_d", mode="before")
    @classmethod
    def parse_target(cls, value):
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                return value
        return value

    @field_validator("method")
    @classmethod
    def check_method(cls, value: str) -> str:
        if value not in ("pdas", "projected_gradient"):
            raise ValueError(f"unknown method {value!r}")
        return value

    @model_validator(mode="after")
    def check_meshes(self) -> "ExperimentConfig":
        if self.nrho is None:
            self.nrho = self.nH
        if self.nh % self.nH:
            raise ValueError(f"nh={self.nh} is not divisible by nH={self.nH}")
        if self.nh % self.nrho:
            raise ValueError(f"nh={self.nh} is not divisible by nrho={self.nrho}")
        if self.space == SpaceKind.MULTISCALE and self.nh < MIN_REFINEMENT * self.nH:
            raise ValueError(
                f"nH={self.nH} is too fine for nh={self.nh}: multiscale solves need nh >= {MIN_REFINEMENT} * nH"
            )
        if self.coeff.kind == "heterogeneous" and self.nh % self.coeff.blocks:
            raise ValueError(f"coeff.blocks={self.coeff.blocks} does not divide nh={self.nh}")
        return self

    def with_updates(self, **update) -> "ExperimentConfig":
        """Copy with some fields replaced, validated like a fresh config"""
        try:
            return type(self).model_validate({**dict(self), **update})
        except ValidationError as exc:
            raise ConfigError(_describe(exc)) from exc

    def bounds_check(self):
        """phi1 <= phi2 after cell averaging on the control mesh"""
        control = StructuredMesh(self.nrho)
        lower = q_rho_project(self.phi1, control).values
        upper = q_rho_project(self.phi2, control).values
        bad = np.flatnonzero(lower > upper)
        if bad.size:
            raise ConfigError(
                f"phi1/phi2: lower bound exceeds upper bound on {bad.size} of {lower.size} control cells "
                f"(cell {int(bad[0])}: {lower[bad[0]]:.6g} > {upper[bad[0]]:.6g})"
            )

    def target_values(self, n_nodes: int):
        """y_d as a float or an array of nodal values on the fine mesh"""
        if isinstance(self.y_d, float):
            return self.y_d
        path = Path(self.y_d)
        try:
            values = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",").ravel()
        except OSError as exc:
            raise ConfigError(f"y_d: cannot read {path}: {exc}") from exc
        if values.shape != (n_nodes,):
            raise ConfigError(f"y_d: {path} has {values.size} values, the fine mesh has {n_nodes} nodes")
        return np.asarray(values, dtype=float)

    def to_flat(self) -> Dict[str, str]:
        """Flat key=value view with dotted sections; build_config(overrides=...) reads it back"""
        flat = {}
        for key in type(self).model_fields:
            value = getattr(self, key)
            if isinstance(value, BaseModel):
                for sub in type(value).model_fields:
                    sub_value = getattr(value, sub)
                    if sub_value is not None:
                        flat[f"{key}.{sub}"] = _format_value(sub_value)
            elif value is not None:
                flat[key] = _format_value(value)
        return flat


def _format_value(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


PRESETS: Dict[str, Dict[str, str]] = {
    "heterogeneous": {
        "name": "heterogeneous",
        "nh": "320",
        "nH": "10",
        "gamma": "1",
        "coeff.kind": "heterogeneous",
        "coeff.blocks": "40",
        "coeff.lo": "1",
        "coeff.hi": "1350",
        "y_d": "1",
        "phi1": "-0.0001,0.0002,0",
        "phi2": "0.0001,0,0.0002",
    },
    "oscillatory": {
        "name": "oscillatory",
        "nh": "320",
        "nH": "10",
        "gamma": "1",
        "coeff.kind": "oscillatory",
        "coeff.eps": "0.025",
        "y_d": "-1",
        "phi1": "-0.005,-0.01,0",
        "phi2": "-0.005,0,0.0007",
    },
}


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """key=value lines; '#' starts a comment, blank lines are skipped"""
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        values[key] = value
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    return parse_lines(text.splitlines(), source=str(path))


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if "." in key:
            section, sub = key.split(".", 1)
            nested.setdefault(section, {})
            if not isinstance(nested[section], dict):
                raise ConfigError(f"{section}: used both as a value and as a section")
            nested[section][sub] = value
        else:
            nested[key] = value
    return nested


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def build_config(
    preset: Optional[str] = None,
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Preset, then file keys, then overrides; each layer replaces keys of the one before"""
    flat: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        flat.update(PRESETS[preset])
    if path is not None:
        flat.update(read_config_file(path))
    if overrides:
        flat.update({key: value for key, value in overrides.items() if value is not None})

    try:
        config = ExperimentConfig(**_nest(flat))
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc
    config.bounds_check()
    logger.debug(f"Experiment config {config.name}: {config.to_flat()}")
    return config


def parse_assignments(assignments: Iterable[str]) -> Dict[str, str]:
    """`--set key=value` arguments"""
    return parse_lines(assignments, source="--set")
