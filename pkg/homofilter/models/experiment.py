"""Experiment documents driving the CLI commands."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from homofilter.exceptions import ConfigError
from homofilter.models.model_file import format_validation_error

logger = logging.getLogger(__name__)


class InvariantSamplerConfig(BaseModel):
    """Long-run sampling of the frozen-x fast process."""

    model_config = ConfigDict(extra="forbid")

    burn_in: int = Field(default=2_000, ge=0, description="Steps discarded per chain")
    thinning: int = Field(default=5, ge=1, description="Keep every thinning-th step")
    retained: int = Field(default=20_000, ge=1, description="Samples kept in total")
    dt: float = Field(default=0.01, gt=0.0, description="Step of the frozen fast SDE")
    z0: Optional[List[float]] = Field(default=None, description="Start point, default 0")
    chains: int = Field(default=10, ge=1, description="Independent chains run in lockstep")
    batches: int = Field(default=20, ge=2, description="Batches for batch-means errors")


class LatticeConfig(BaseModel):
    """Tensor lattice in x on which averaged coefficients are tabulated."""

    model_config = ConfigDict(extra="forbid")

    lower: List[float] = Field(..., min_length=1)
    upper: List[float] = Field(..., min_length=1)
    nodes: List[int] = Field(..., min_length=1)

    @model_validator(mode="after")
    def validate_bounds(self):
        if not (len(self.lower) == len(self.upper) == len(self.nodes)):
            raise ValueError("lower, upper and nodes must have the same length")
        for lo, hi, k in zip(self.lower, self.upper, self.nodes):
            if not lo < hi:
                raise ValueError(f"lattice bounds must be strictly ordered, got [{lo}, {hi}]")
            if k < 2:
                raise ValueError("each lattice axis needs at least 2 nodes")
        return self


class ClosedFormHomogenization(BaseModel):
    """Analytic averaged coefficients as expressions in x1..xm."""

    model_config = ConfigDict(extra="forbid")

    bbar: List[Union[str, float]]
    abar: List[List[Union[str, float]]]
    sigbar: List[List[Union[str, float]]]
    hbar: List[Union[str, float]]


class AssumptionCheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x_lower: float = -3.0
    x_upper: float = 3.0
    z_lower: float = -5.0
    z_upper: float = 5.0
    samples: int = Field(default=2_000, ge=1)
    radius: float = Field(default=1.0, ge=0.0, description="Recurrence checked for |z| > radius")
    exponent: float = Field(default=2.0, description="Exponent of |z| in the recurrence margin")


class BiasBudgetConfig(BaseModel):
    """Refinement run at the largest epsilon."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    particle_factor: int = Field(default=2, ge=1)
    step_factor: int = Field(default=2, ge=1, description="Coarse step divided by this factor")
    sample_factor: int = Field(default=4, ge=1, description="Averaging samples multiplied by this")
    threshold: float = Field(default=0.25, gt=0.0)


class CorrectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    samples: int = Field(default=1_000, ge=20, description="Fast paths per probe point")
    groups: int = Field(default=20, ge=2, description="Batch-means groups")
    probe_points: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(-0.5, 0.0), (0.0, 0.5), (0.5, -0.5)]
    )
    substeps: int = Field(default=0, ge=0, description="Fast substeps per coarse step, 0 = auto")
    band: Tuple[float, float] = (1.4, 2.8)
    fast_horizon: float = Field(default=10.0, gt=0.0, description="Longest fast-time lag kept in the corrector sum")
    observation_paths: int = Field(default=20, ge=1, description="Observation records averaged in the scaling check")


class DualConfig(BaseModel):
    """Grid duals (m = n = 1) and the corrector check."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    epsilon: float = Field(default=0.25, gt=0.0, lt=1.0)
    phi_id: int = Field(default=2, ge=1, description="Family member used as terminal condition")
    x_bounds: Tuple[float, float] = (-6.0, 6.0)
    x_nodes: int = Field(default=121, ge=5)
    z_bounds: Tuple[float, float] = (-6.0, 6.0)
    z_nodes: int = Field(default=61, ge=5)
    substeps: int = Field(default=0, ge=0, description="Drift substeps per coarse step, 0 = auto")
    check_fractions: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    tolerance: float = Field(default=0.02, gt=0.0)
    boundary_tolerance: float = Field(default=0.005, gt=0.0)
    boundary_check: bool = True
    full_dual: bool = True
    particles: int = Field(default=20_000, ge=2)
    corrector: CorrectorConfig = Field(default_factory=CorrectorConfig)

    @field_validator("x_bounds", "z_bounds")
    @classmethod
    def validate_bounds(cls, v):
        if not v[0] < v[1]:
            raise ValueError("grid bounds must be strictly ordered")
        return v

    @field_validator("check_fractions")
    @classmethod
    def validate_fractions(cls, v):
        if not v or any(not 0.0 <= t <= 1.0 for t in v):
            raise ValueError("check fractions must lie in [0, 1]")
        return sorted(set(v))


class AcceptanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    slope_band: Tuple[float, float] = (0.7, 1.3)
    metric_slope_band: Optional[Tuple[float, float]] = (0.7, 1.3)
    require_decreasing: bool = True
    require_bias_budget: bool = True
    flat: bool = Field(
        default=False,
        description="Expect no epsilon dependence: errors must agree within 2 SE"
    )


class ExperimentConfig(BaseModel):
    """A convergence study: model, epsilon sweep, Monte Carlo sizes, toggles."""

    model_config = ConfigDict(extra="forbid")

    model: str = Field(..., description="Model file path, relative to the experiment file")
    epsilons: List[float] = Field(
        ...,
        description="Strictly decreasing values in (0, 1)",
        examples=[[0.5, 0.35, 0.25, 0.18, 0.125]]
    )
    replications: int = Field(default=200, ge=2)
    particles: int = Field(default=2_000, ge=2)
    horizon: float = Field(default=1.0, gt=0.0)
    dt: float = Field(default=0.01, gt=0.0, description="Coarse time step")
    fast_factor: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    test_functions: int = Field(default=4, ge=1, le=64, description="Family members for paired errors")
    metric_size: int = Field(default=16, ge=1, le=64, description="Family members in the weak metric")
    metric_scale: float = Field(default=2.0, gt=0.0, description="Largest length-scale of the family")
    probe_times: List[float] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = None
    resampling: bool = True
    resample_threshold: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    error_moment: float = Field(default=1.0, ge=1.0)
    sampler: InvariantSamplerConfig = Field(default_factory=InvariantSamplerConfig)
    lattice: Optional[LatticeConfig] = None
    closed_form: Optional[ClosedFormHomogenization] = None
    cache_dir: Optional[str] = Field(default=None, description="Homogenization cache to load")
    assumptions: AssumptionCheckConfig = Field(default_factory=AssumptionCheckConfig)
    bias_budget: BiasBudgetConfig = Field(default_factory=BiasBudgetConfig)
    dual: DualConfig = Field(default_factory=DualConfig)
    acceptance: Optional[AcceptanceConfig] = None
    traces: bool = Field(default=False, description="Write filter traces of replication 0")
    plot: bool = True

    # Set by load_experiment; not part of the document
    base_dir: Optional[str] = Field(default=None, exclude=True)

    @field_validator("epsilons")
    @classmethod
    def validate_epsilons(cls, v):
        """Epsilons must be non-empty, inside (0, 1) and strictly decreasing."""
        if not v:
            raise ValueError("epsilon list cannot be empty")
        if any(not 0.0 < e < 1.0 for e in v):
            raise ValueError("epsilon values must lie in (0, 1)")
        if any(a <= b for a, b in zip(v, v[1:])):
            raise ValueError("epsilon values must be strictly decreasing")
        return v

    @model_validator(mode="after")
    def validate_grid(self):
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ValueError(f"horizon {self.horizon} is not an integer multiple of dt {self.dt}")
        if any(not 0.0 <= t <= self.horizon for t in self.probe_times):
            raise ValueError("probe times must lie in [0, horizon]")
        if self.metric_size < self.test_functions:
            raise ValueError("metric_size must be at least test_functions")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def resolve(self, relative: Optional[str]) -> Optional[Path]:
        """Resolve a path relative to the experiment file."""
        if relative is None:
            return None
        path = Path(relative)
        if not path.is_absolute() and self.base_dir is not None:
            path = Path(self.base_dir) / path
        return path

    @property
    def model_path(self) -> Path:
        return self.resolve(self.model)


def load_experiment(path: Union[str, Path], overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Read an experiment JSON document; overrides replace top-level keys."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read experiment file {path}: {e}", location=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"experiment file {path} is not valid JSON: {e.msg}",
            location=f"{path}:{e.lineno}:{e.colno}",
        )
    if not isinstance(raw, dict):
        raise ConfigError(f"experiment file {path} must contain a JSON object", location=str(path))

    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(
            f"invalid experiment file {path}: {format_validation_error(e)}",
            location=str(path),
        )
    cfg.base_dir = str(path.parent.resolve())
    logger.info(f"Loaded experiment {path} with {len(cfg.epsilons)} epsilon values")
    return cfg
