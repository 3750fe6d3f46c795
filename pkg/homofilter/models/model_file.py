"""Schema of model files (JSON) describing a multiscale filtering problem."""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from homofilter.exceptions import ConfigError

logger = logging.getLogger(__name__)


class BuiltinFamily(str, Enum):
    """Named parametric coefficient families."""
    CONSTANT = "constant"
    LINEAR = "linear"
    OU = "ou"
    TANH_BOUNDED = "tanh_bounded"


class BuiltinCoefficient(BaseModel):
    """A coefficient given by a builtin family, e.g. {"builtin": "ou", "params": {...}}."""

    model_config = ConfigDict(extra="forbid")

    builtin: BuiltinFamily = Field(..., description="Family name")
    params: Dict[str, Any] = Field(
        default_factory=dict,
        description="Family parameters (matrices as nested lists)"
    )


Scalar = Union[str, float]
CoefficientSpec = Union[
    BuiltinCoefficient,
    Scalar,
    List[Scalar],
    List[List[Scalar]],
]


class Dimensions(BaseModel):
    """Dimensions of slow state, fast state, observation and the three noises."""

    model_config = ConfigDict(extra="forbid")

    m: int = Field(..., ge=1, description="Slow state dimension")
    n: int = Field(..., ge=1, description="Fast state dimension")
    d: int = Field(..., ge=1, description="Observation dimension")
    w: int = Field(..., ge=1, description="Dimension of W (slow noise, correlated with Y)")
    v: int = Field(..., ge=1, description="Dimension of V (fast noise)")
    u: int = Field(..., ge=1, description="Dimension of U (independent observation noise)")


class PointMass(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["point"] = "point"
    value: float = 0.0


class GaussianLaw(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["gaussian"] = "gaussian"
    mean: float = 0.0
    std: float = Field(default=1.0, ge=0.0)


CoordinateLaw = Union[PointMass, GaussianLaw]


class InitialLawSpec(BaseModel):
    """Product initial law: one distribution per coordinate of x and z."""

    model_config = ConfigDict(extra="forbid")

    x: List[CoordinateLaw] = Field(..., min_length=1)
    z: List[CoordinateLaw] = Field(..., min_length=1)


class ModelFile(BaseModel):
    """Top-level model document; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    dims: Dimensions
    epsilon: float = Field(..., gt=0.0, lt=1.0, description="Scale separation parameter")
    b: CoefficientSpec = Field(..., description="Slow drift, R^m")
    sigma: CoefficientSpec = Field(..., description="Slow diffusion, R^{m x w}")
    f: CoefficientSpec = Field(..., description="Fast drift, R^n")
    g: CoefficientSpec = Field(..., description="Fast diffusion, R^{n x v}")
    h: CoefficientSpec = Field(..., description="Observation function, R^d")
    alpha: List[List[float]] = Field(..., description="Correlated observation noise, d x w")
    gamma: List[List[float]] = Field(..., description="Independent observation noise, d x u")
    initial_law: InitialLawSpec
    unsafe_unbounded: bool = Field(
        default=False,
        description="Allow unbounded builtin families (linear oracle studies only)"
    )

    @field_validator("alpha", "gamma")
    @classmethod
    def validate_matrix(cls, v):
        """Matrices must be rectangular and non-empty."""
        if not v or not v[0]:
            raise ValueError("matrix must be non-empty")
        width = len(v[0])
        if any(len(row) != width for row in v):
            raise ValueError("matrix rows must have equal length")
        return v


def format_validation_error(exc: ValidationError) -> str:
    """One line per pydantic error: 'loc: message'."""
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err.get("loc", ()))
        lines.append(f"{loc}: {err.get('msg')}")
    return "; ".join(lines)


def read_model_file(path: Union[str, Path]) -> ModelFile:
    """Read and validate a model JSON document.

    Raises ConfigError for unreadable files, malformed JSON or schema violations.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read model file {path}: {e}", location=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"model file {path} is not valid JSON: {e.msg}",
            location=f"{path}:{e.lineno}:{e.colno}",
        )

    try:
        doc = ModelFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(
            f"invalid model file {path}: {format_validation_error(e)}",
            location=str(path),
        )

    logger.debug(f"Read model file {path} with dims {doc.dims.model_dump()}")
    return doc
