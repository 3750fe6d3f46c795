"""Paired replications of the full and reduced filters, aggregation and fits."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from homofilter.config import settings
from homofilter.exceptions import FitError, HomofilterError
from homofilter.models.experiment import AcceptanceConfig, ExperimentConfig
from homofilter.models.reports import (
    AcceptanceResult,
    BiasBudget,
    ConvergenceReport,
    EpsilonSummary,
    ErrorRow,
    FailureRecord,
    FitResult,
)
from homofilter.services.averaging_service import HomogenizedModel
from homofilter.services.filter_service import FilterRun, run_full_filter, run_reduced_filter
from homofilter.services.function_family import TestFunction, metric_family
from homofilter.services.model_service import MultiscaleModel
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, simulate_joint
from homofilter.services.weak_metric import metric_from_estimates

logger = logging.getLogger(__name__)


@dataclass
class ReplicationResult:
    """Paired outcome of one replication at one epsilon."""

    epsilon: float
    replication: int
    abs_err: np.ndarray  # (K,)
    rho_abs_err: np.ndarray  # (K,)
    metric_d: float
    inverse_rho1_full: float
    inverse_rho1_reduced: float
    probe_err: Dict[float, float] = field(default_factory=dict)
    runs: Optional[Tuple[FilterRun, FilterRun]] = None


def study_grid(cfg: ExperimentConfig, step_factor: int = 1) -> TimeGrid:
    grid = TimeGrid(cfg.horizon, cfg.n_steps, cfg.fast_factor or settings.FAST_FACTOR)
    return grid.refined(step_factor) if step_factor > 1 else grid


def run_replication(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        cfg: ExperimentConfig,
        grid: TimeGrid,
        replication: int,
        family: Sequence[TestFunction],
        particles: Optional[int] = None,
        keep_runs: bool = False,
) -> ReplicationResult:
    """Simulate one joint path and run both filters on its observation record.

    The streams depend on (seed, replication) only, so every epsilon sees the
    same W, U and initial condition.
    """
    particles = particles or cfg.particles
    stream = RngStream.for_replication(cfg.seed, replication)
    bundle = simulate_joint(model, grid, stream.child("path"))

    probe_steps = {grid.step_of(t): t for t in cfg.probe_times}
    if keep_runs:
        checkpoints = range(grid.n_steps + 1)
    else:
        checkpoints = sorted(set(probe_steps) | {grid.n_steps})
    options = dict(
        checkpoints=checkpoints,
        resampling=cfg.resampling,
        threshold=cfg.resample_threshold,
    )
    full = run_full_filter(model, bundle.dY, grid, particles, stream.child("full"), family, **options)
    reduced = run_reduced_filter(
        homog, model.alpha, bundle.dY, grid, particles, stream.child("reduced"),
        model.initial_law, family, **options,
    )

    K = cfg.test_functions
    final_full, final_reduced = full.final, reduced.final
    probe_err = {
        t: float(abs(full.estimate_at(step).pi[0] - reduced.estimate_at(step).pi[0]))
        for step, t in probe_steps.items()
    }
    return ReplicationResult(
        epsilon=model.epsilon,
        replication=replication,
        abs_err=np.abs(final_full.pi[:K] - final_reduced.pi[:K]),
        rho_abs_err=np.abs(final_full.rho[:K] - final_reduced.rho[:K]),
        metric_d=metric_from_estimates(final_full.pi, final_reduced.pi),
        inverse_rho1_full=full.inverse_rho1,
        inverse_rho1_reduced=reduced.inverse_rho1,
        probe_err=probe_err,
        runs=(full, reduced) if keep_runs else None,
    )


def run_replications(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        cfg: ExperimentConfig,
        grid: TimeGrid,
        workers: int = 1,
        particles: Optional[int] = None,
) -> Tuple[List[ReplicationResult], List[FailureRecord]]:
    """All replications at one epsilon; results come back in replication order."""
    family = metric_family(cfg.metric_size, cfg.metric_scale)

    def work(r: int):
        try:
            return run_replication(
                model, homog, cfg, grid, r, family, particles,
                keep_runs=cfg.traces and r == 0,
            )
        except HomofilterError as e:
            logger.error(f"Replication {r} at epsilon={model.epsilon:g} failed: {e.message}")
            return FailureRecord(epsilon=model.epsilon, replication=r, error=e.detail)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, range(cfg.replications)))
    else:
        outcomes = [work(r) for r in range(cfg.replications)]

    results = [o for o in outcomes if isinstance(o, ReplicationResult)]
    failures = [o for o in outcomes if isinstance(o, FailureRecord)]
    logger.debug(
        f"epsilon={model.epsilon:g}: {len(results)} replications done, {len(failures)} failed"
    )
    return results, failures


def _stderr(values: np.ndarray) -> float:
    if values.size < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def aggregate_epsilon(
        epsilon: float,
        results: Sequence[ReplicationResult],
        error_moment: float = 1.0,
) -> Tuple[List[ErrorRow], EpsilonSummary]:
    """Per-phi rows and the per-epsilon summary."""
    if not results:
        raise FitError(f"no replication completed at epsilon={epsilon:g}")
    errs = np.stack([r.abs_err for r in results])  # (R, K)
    rho_errs = np.stack([r.rho_abs_err for r in results])
    metric = np.array([r.metric_d for r in results])
    count = len(results)

    rows = [
        ErrorRow(
            epsilon=epsilon,
            phi_id=k + 1,
            mean_err=float(errs[:, k].mean()),
            stderr=_stderr(errs[:, k]),
            metric_d_mean=float(metric.mean()),
            moment_p=float(np.mean(errs[:, k] ** error_moment)),
            rho_mean_err=float(rho_errs[:, k].mean()),
            replications=count,
        )
        for k in range(errs.shape[1])
    ]
    averaged = errs.mean(axis=1)
    probe_times = sorted(results[0].probe_err)
    summary = EpsilonSummary(
        epsilon=epsilon,
        mean_err=float(averaged.mean()),
        stderr=_stderr(averaged),
        metric_d_mean=float(metric.mean()),
        metric_d_stderr=_stderr(metric),
        inverse_rho1_full=float(np.mean([r.inverse_rho1_full for r in results])),
        inverse_rho1_reduced=float(np.mean([r.inverse_rho1_reduced for r in results])),
        probe_mean_err={f"{t:g}": float(np.mean([r.probe_err[t] for r in results])) for t in probe_times},
        replications=count,
    )
    return rows, summary


def fit_log_log(epsilons: Sequence[float], errors: Sequence[float], level: float = 0.95) -> FitResult:
    """OLS of log error on log epsilon with a t-based confidence band for the slope."""
    eps = np.asarray(epsilons, dtype=float)
    err = np.asarray(errors, dtype=float)
    if eps.size < 3:
        raise FitError(f"slope fit needs at least 3 epsilon points, got {eps.size}")
    if np.any(~np.isfinite(err)) or np.any(err <= 0.0):
        raise FitError("slope fit needs finite positive errors")
    x, y = np.log(eps), np.log(err)
    res = stats.linregress(x, y)
    t = stats.t.ppf(0.5 + level / 2.0, eps.size - 2)
    ci = (float(res.slope - t * res.stderr), float(res.slope + t * res.stderr))
    flags = []
    if ci[0] <= 0.0 <= ci[1]:
        flags.append("no-epsilon-dependence")
    return FitResult(
        slope=float(res.slope),
        intercept=float(res.intercept),
        slope_ci=ci,
        slope_stderr=float(res.stderr),
        residuals=[float(r) for r in y - (res.intercept + res.slope * x)],
        n_points=int(eps.size),
        flags=flags,
    )


def fit_report(report: ConvergenceReport) -> ConvergenceReport:
    """Fill the averaged, per-phi and metric fits; a refused fit is recorded, not raised."""
    eps = [s.epsilon for s in report.per_epsilon]
    try:
        report.fit = fit_log_log(eps, [s.mean_err for s in report.per_epsilon])
        report.metric_fit = fit_log_log(eps, [s.metric_d_mean for s in report.per_epsilon])
        phi_ids = sorted({row.phi_id for row in report.rows})
        for phi_id in phi_ids:
            rows = [row for row in report.rows if row.phi_id == phi_id]
            try:
                report.phi_fits[phi_id] = fit_log_log([r.epsilon for r in rows], [r.mean_err for r in rows])
            except FitError as e:
                logger.warning(f"Fit for phi {phi_id} refused: {e.message}")
    except FitError as e:
        report.fit_refused = e.message
        logger.warning(f"Slope fit refused: {e.message}")
    if report.fit is not None:
        logger.info(
            f"Fitted slope {report.fit.slope:.3f} "
            f"(CI {report.fit.slope_ci[0]:.3f}..{report.fit.slope_ci[1]:.3f})"
        )
    return report


def bias_budget(
        epsilon: float,
        baseline: EpsilonSummary,
        refined: EpsilonSummary,
        threshold: float,
        particles: int,
        n_steps: int,
) -> BiasBudget:
    shift = abs(refined.mean_err - baseline.mean_err) / baseline.mean_err if baseline.mean_err > 0 else math.inf
    budget = BiasBudget(
        epsilon=epsilon,
        baseline_err=baseline.mean_err,
        refined_err=refined.mean_err,
        relative_shift=shift,
        threshold=threshold,
        particles=particles,
        n_steps=n_steps,
        passed=shift < threshold,
    )
    if not budget.passed:
        logger.warning(f"Bias budget failed at epsilon={epsilon:g}: shift {shift:.1%} >= {threshold:.0%}")
    return budget


def evaluate_acceptance(report: ConvergenceReport, gate: AcceptanceConfig) -> AcceptanceResult:
    """Slope bands, strict decrease, bias budget, or flatness when no dependence is expected."""
    checks: Dict[str, bool] = {}
    reasons: List[str] = []
    summaries = report.per_epsilon

    checks["complete"] = not report.partial
    if report.partial:
        reasons.append(f"{len(report.failures)} replication(s) failed")

    if gate.flat:
        flat = all(
            abs(a.mean_err - b.mean_err) <= 2.0 * math.hypot(a.stderr, b.stderr)
            for i, a in enumerate(summaries)
            for b in summaries[i + 1:]
        )
        checks["flat"] = flat
        if not flat:
            reasons.append("errors differ by more than 2 combined standard errors")
    else:
        lo, hi = gate.slope_band
        slope_ok = report.fit is not None and lo <= report.fit.slope <= hi
        checks["slope"] = slope_ok
        if not slope_ok:
            got = f"{report.fit.slope:.3f}" if report.fit else "no fit"
            reasons.append(f"slope {got} outside [{lo:g}, {hi:g}]")
        if gate.metric_slope_band is not None:
            lo, hi = gate.metric_slope_band
            ok = report.metric_fit is not None and lo <= report.metric_fit.slope <= hi
            checks["metric_slope"] = ok
            if not ok:
                got = f"{report.metric_fit.slope:.3f}" if report.metric_fit else "no fit"
                reasons.append(f"metric slope {got} outside [{lo:g}, {hi:g}]")
        if gate.require_decreasing:
            errs = [s.mean_err for s in summaries]
            ok = all(a > b for a, b in zip(errs, errs[1:]))
            checks["decreasing"] = ok
            if not ok:
                reasons.append("mean error is not strictly decreasing in epsilon")

    if gate.require_bias_budget:
        ok = report.bias_budget is not None and report.bias_budget.passed
        checks["bias_budget"] = ok
        if not ok:
            reasons.append("bias budget not satisfied")

    return AcceptanceResult(passed=all(checks.values()), checks=checks, reasons=reasons)
