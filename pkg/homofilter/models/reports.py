"""Output models: diagnostics, study reports and error details."""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class ErrorDetail(BaseModel):
    """Detailed error information."""

    code: str = Field(
        ...,
        description="Error code"
    )
    message: str = Field(
        ...,
        description="Error message"
    )
    location: Optional[str] = Field(
        default=None,
        description="Where the error occurred (offset, step, particle, node)"
    )
    suggestion: Optional[str] = Field(
        default=None,
        description="Suggestion for fixing the error"
    )


class ErrorResponse(BaseModel):
    """Top-level error returned by a CLI command."""

    error: str = Field(
        ...,
        description="General error description"
    )
    details: Optional[List[ErrorDetail]] = Field(
        default=None,
        description="Detailed error information"
    )
    run_id: Optional[str] = Field(
        default=None,
        description="ID of the failed run, if applicable"
    )
    exit_code: int = Field(
        default=3,
        description="Process exit code associated with this error"
    )


class AssumptionReport(BaseModel):
    """Spot checks of the recurrence, ellipticity and boundedness assumptions."""

    samples: int = Field(..., description="Number of sampled (x, z) points")
    recurrence_exponent: float = Field(..., description="Exponent used in -<f,z>/|z|^exponent")
    recurrence_radius: float = Field(..., description="Only points with |z| > radius are checked")
    recurrence_margin: Optional[float] = Field(
        default=None,
        description="min of -<f(x,z),z>/|z|^exponent over sampled |z| > radius; None if no point qualified"
    )
    ellipticity_min: float = Field(..., description="Smallest eigenvalue of g g* over the samples")
    ellipticity_max: float = Field(..., description="Largest eigenvalue of g g* over the samples")
    sup_norms: Dict[str, float] = Field(
        default_factory=dict,
        description="Sampled sup-norms of b, sigma, f, g, h"
    )
    k_eigenvalues: List[float] = Field(
        default_factory=list,
        description="Eigenvalues of K = alpha alpha* + gamma gamma* of the raw model"
    )
    unbounded_families: List[str] = Field(
        default_factory=list,
        description="Coefficient fields built from unbounded families"
    )
    flags: List[str] = Field(
        default_factory=list,
        description="Violated or unverifiable assumptions"
    )

    @property
    def ok(self) -> bool:
        return not self.flags


class FitResult(BaseModel):
    """Ordinary least squares fit of log error against log epsilon."""

    slope: float = Field(..., description="Fitted slope of log error vs log epsilon")
    intercept: float = Field(..., description="Fitted intercept")
    slope_ci: Tuple[float, float] = Field(..., description="95% confidence band of the slope")
    slope_stderr: float = Field(..., description="Standard error of the slope")
    residuals: List[float] = Field(..., description="One residual per epsilon point")
    n_points: int = Field(..., description="Number of epsilon points used")
    flags: List[str] = Field(default_factory=list, description="Fit warnings")


class ErrorRow(BaseModel):
    """Per-epsilon, per-test-function paired error statistics."""

    epsilon: float
    phi_id: int
    mean_err: float = Field(..., description="(1/R) sum_r |pi_full(phi) - pi_reduced(phi)|")
    stderr: float = Field(..., description="Standard error of mean_err")
    metric_d_mean: float = Field(..., description="Mean weak-metric distance at this epsilon")
    moment_p: float = Field(..., description="(1/R) sum_r |pi_full(phi) - pi_reduced(phi)|^p")
    rho_mean_err: float = Field(..., description="Mean unnormalized error |rho_full(phi) - rho_reduced(phi)|")
    replications: int = Field(..., description="Replications that completed")


class EpsilonSummary(BaseModel):
    """Per-epsilon aggregate over test functions."""

    epsilon: float
    mean_err: float = Field(..., description="Paired error averaged over the test functions")
    stderr: float
    metric_d_mean: float
    metric_d_stderr: float
    inverse_rho1_full: float = Field(..., description="Mean of 1/rho_full(1) at T")
    inverse_rho1_reduced: float = Field(..., description="Mean of 1/rho_reduced(1) at T")
    probe_mean_err: Dict[str, float] = Field(
        default_factory=dict,
        description="Mean paired error of the first test function at each probe time"
    )
    replications: int


class BiasBudget(BaseModel):
    """Refinement run at the largest epsilon."""

    epsilon: float
    baseline_err: float
    refined_err: float
    relative_shift: float
    threshold: float
    particles: int
    n_steps: int
    passed: bool


class FailureRecord(BaseModel):
    """A replication that aborted."""

    epsilon: float
    replication: int
    error: ErrorDetail


class AcceptanceResult(BaseModel):
    passed: bool
    checks: Dict[str, bool] = Field(default_factory=dict)
    reasons: List[str] = Field(default_factory=list)


class ConvergenceReport(BaseModel):
    """Result of an epsilon sweep comparing the full and reduced filters."""

    seed: int
    config_hash: str
    error_moment: float = Field(default=1.0, description="Order p of the reported error moment")
    rows: List[ErrorRow] = Field(default_factory=list)
    per_epsilon: List[EpsilonSummary] = Field(default_factory=list)
    fit: Optional[FitResult] = None
    metric_fit: Optional[FitResult] = None
    phi_fits: Dict[int, FitResult] = Field(default_factory=dict)
    fit_refused: Optional[str] = None
    bias_budget: Optional[BiasBudget] = None
    failures: List[FailureRecord] = Field(default_factory=list)
    acceptance: Optional[AcceptanceResult] = None

    @property
    def partial(self) -> bool:
        return bool(self.failures)


class DualityCheck(BaseModel):
    """rho_t(v_t) / rho_0(v_0) - 1 along the check times."""

    label: str
    times: List[float]
    pairing: List[float] = Field(..., description="rho_t(v_t) at each check time")
    relative_drift: List[float]
    max_abs_drift: float
    initial_law_value: float = Field(..., description="Integral of v_0 against the initial law")
    initial_law_gap: float = Field(..., description="|rho_0(v_0) - initial_law_value| relative to the latter")
    tolerance: float
    passed: bool


class CorrectorScaling(BaseModel):
    """Mean |psi_0| at epsilon and epsilon/2 over the probe points."""

    epsilon: float
    mean_abs_psi: float
    mean_abs_psi_half: float
    ratio: float
    band: Tuple[float, float]
    passed: bool
    mean_abs_residual: Optional[float] = None
    mean_abs_residual_half: Optional[float] = None
    residual_ratio: Optional[float] = None


class DualCheckReport(BaseModel):
    epsilon: float
    duality: List[DualityCheck] = Field(default_factory=list)
    corrector: Optional[CorrectorScaling] = None
    boundary_influence: Dict[str, float] = Field(
        default_factory=dict,
        description="Largest change of v_0 at the probes when the domain is doubled, per dual"
    )
    boundary_tolerance: Optional[float] = None

    @property
    def passed(self) -> bool:
        duality_ok = all(check.passed for check in self.duality)
        corrector_ok = self.corrector is None or self.corrector.passed
        boundary_ok = self.boundary_tolerance is None or all(
            v <= self.boundary_tolerance for v in self.boundary_influence.values()
        )
        return duality_ok and corrector_ok and boundary_ok
