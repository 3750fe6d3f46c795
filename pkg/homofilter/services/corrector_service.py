"""Monte Carlo corrector psi for the averaged dual and the expansion residual.

With x frozen, the fast semigroup acting on a centered difference
theta(x, .) - theta_bar(x) depends only on the fast-time lag. Sampling it
once per (x, z, eps) gives lag profiles D[l], l = 0..L, and

    psi_k = sum_{j >= k} D[j - k] . u_j

where u_j collects v0_{j+1}, d_x v0_{j+1}, d_xx v0_{j+1} against dt and dY_j.
The lag structure is an upper-triangular Toeplitz matrix, so the whole
trajectory comes from a handful of matrix-vector products. Lags beyond the
fast-time horizon are dropped.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import toeplitz

from homofilter.config import settings
from homofilter.exceptions import ConfigError, CorrectorError
from homofilter.models.experiment import CorrectorConfig, InvariantSamplerConfig
from homofilter.models.reports import CorrectorScaling
from homofilter.services.averaging_service import (
    HomogenizedModel,
    centering_check,
    estimate_invariant_measure,
)
from homofilter.services.dual_service import DualGridConfig, DualSolveResult, solve_averaged_dual, solve_full_dual
from homofilter.services.function_family import TestFunction
from homofilter.services.model_service import MultiscaleModel
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, simulate_frozen_fast, simulate_joint
from homofilter.utils.csv_utils import write_csv

logger = logging.getLogger(__name__)


@dataclass
class LagProfile:
    """Group means of the centered differences along the fast-time lags."""

    x: np.ndarray
    z: np.ndarray
    epsilon: float
    lag_dt: float  # fast time per coarse step
    drift: np.ndarray  # (G, L+1)  b - b_bar
    diffusion: np.ndarray  # (G, L+1)  sigma sigma* - a_bar
    observation: np.ndarray  # (G, L+1, d)  h - h_bar
    correlation: np.ndarray  # (G, L+1, d)  alpha (sigma - sigma_bar)*

    @property
    def groups(self) -> int:
        return self.drift.shape[0]

    @property
    def lags(self) -> int:
        return self.drift.shape[1]


@dataclass
class CorrectorTrace:
    """psi_hat_k at one probe point with batch-means standard errors."""

    times: np.ndarray
    psi: np.ndarray
    se: np.ndarray
    point: Tuple[float, float]
    epsilon: float


def certify_centering(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        x: np.ndarray,
        sampler: InvariantSamplerConfig,
        stream: RngStream,
) -> float:
    """Largest centering residual of b, sigma, h against the homogenized values at x."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    sample = estimate_invariant_measure(model, x[0], sampler, stream)
    residual = max(
        centering_check(model.b, homog.bbar(x)[0], sample),
        centering_check(model.sigma, homog.sigbar(x)[0], sample),
        centering_check(model.h, homog.hbar(x)[0], sample),
    )
    if residual > settings.CENTERING_TOLERANCE:
        raise CorrectorError(
            f"centering residual {residual:.3g} at x={x[0].tolist()} exceeds "
            f"{settings.CENTERING_TOLERANCE:g}; the corrector estimate would be biased",
            suggestion="refine the homogenization lattice or increase retained samples",
        )
    logger.debug(f"Centering residual {residual:.3g} at x={x[0].tolist()}")
    return residual


def fast_lag_profile(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        point: Tuple[float, float],
        grid: TimeGrid,
        cfg: CorrectorConfig,
        stream: RngStream,
) -> LagProfile:
    """Sample frozen-x fast paths from z and average the centered differences per lag."""
    x = np.atleast_1d(np.asarray(point[0], dtype=float))
    z = np.atleast_1d(np.asarray(point[1], dtype=float))
    eps = model.epsilon
    substeps = cfg.substeps or grid.fast_substeps(eps)
    lag_dt = grid.dt / eps ** 2
    lags = min(grid.n_steps - 1, int(math.floor(cfg.fast_horizon / lag_dt)))
    per_group = math.ceil(cfg.samples / cfg.groups)
    count = per_group * cfg.groups

    paths = simulate_frozen_fast(
        model, x, np.tile(z, (count, 1)), lags * substeps, lag_dt / substeps, stream
    )
    zs = paths[::substeps].reshape(-1, model.n)  # ((L+1) * count, n)
    xs = np.broadcast_to(x.reshape(1, -1), (zs.shape[0], model.m))
    X = x.reshape(1, -1)

    sig = model.sigma(xs, zs)[:, 0, :]
    sig_bar = homog.sigbar(X)[0, 0, :]
    values = {
        "drift": model.b(xs, zs)[:, 0] - homog.bbar(X)[0, 0],
        "diffusion": np.einsum("pj,pj->p", sig, sig) - homog.abar(X)[0, 0, 0],
        "observation": model.h(xs, zs) - homog.hbar(X)[0],
        "correlation": (sig - sig_bar) @ model.alpha.T,
    }

    def group_means(v):
        shaped = v.reshape((lags + 1, cfg.groups, per_group) + v.shape[1:])
        return np.swapaxes(shaped.mean(axis=2), 0, 1)

    return LagProfile(
        x=x, z=z, epsilon=eps, lag_dt=lag_dt,
        **{name: group_means(v) for name, v in values.items()},
    )


def _lag_matrix(profile: np.ndarray, size: int) -> np.ndarray:
    """Upper-triangular Toeplitz T[k, j] = D[j - k]."""
    row = np.zeros(size)
    kept = min(size, profile.size)
    row[:kept] = profile[:kept]
    column = np.zeros(size)
    column[0] = row[0]
    return toeplitz(column, row)


def corrector_from_profile(
        profile: LagProfile,
        v0: DualSolveResult,
        dY: np.ndarray,
        grid: TimeGrid,
) -> CorrectorTrace:
    """psi_hat along the grid for one observation record."""
    N, dt = grid.n_steps, grid.dt
    if v0.n_steps != N or dY.shape[0] != N:
        raise ValueError("dual solution, observation and grid must share the number of steps")
    x = profile.x[:1]
    derivs = np.array([v0.snapshot(j).derivatives(x) for j in range(1, N + 1)])[:, :, 0]
    v, dv, d2v = derivs[:, 0], derivs[:, 1], derivs[:, 2]

    per_group = np.zeros((profile.groups, N + 1))
    for g in range(profile.groups):
        total = _lag_matrix(profile.drift[g], N) @ (dv * dt)
        total += _lag_matrix(profile.diffusion[g], N) @ (0.5 * d2v * dt)
        for i in range(dY.shape[1]):
            total += _lag_matrix(profile.observation[g, :, i], N) @ (v * dY[:, i])
            total += _lag_matrix(profile.correlation[g, :, i], N) @ (dv * dY[:, i])
        per_group[g, :N] = total

    psi = per_group.mean(axis=0)
    se = per_group.std(axis=0, ddof=1) / math.sqrt(profile.groups)
    return CorrectorTrace(
        times=grid.times,
        psi=psi,
        se=se,
        point=(float(profile.x[0]), float(profile.z[0])),
        epsilon=profile.epsilon,
    )


def estimate_corrector(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        v0: DualSolveResult,
        point: Tuple[float, float],
        dY: np.ndarray,
        grid: TimeGrid,
        cfg: CorrectorConfig,
        stream: RngStream,
        sampler: Optional[InvariantSamplerConfig] = None,
) -> CorrectorTrace:
    """Corrector trajectory at (x, z); refuses when the coefficients are not centered."""
    if model.m != 1:
        raise ConfigError(f"corrector estimation needs m = 1, got m = {model.m}")
    if sampler is not None:
        certify_centering(model, homog, np.array([point[0]]), sampler, stream.child("centering"))
    profile = fast_lag_profile(model, homog, point, grid, cfg, stream.child("fast_paths"))
    return corrector_from_profile(profile, v0, dY, grid)


def expansion_residual(
        vfull: DualSolveResult,
        v0: DualSolveResult,
        traces: Sequence[CorrectorTrace],
        step: int = 0,
) -> np.ndarray:
    """R_hat = v^eps - v0 - psi_hat at each trace's probe point."""
    residual = []
    for trace in traces:
        x, z = trace.point
        full = vfull.evaluate(step, np.array([x]), np.array([z]))[0]
        averaged = v0.evaluate(step, np.array([x]))[0]
        residual.append(full - averaged - trace.psi[step])
    return np.asarray(residual)


def corrector_scaling(
        model: MultiscaleModel,
        homog: HomogenizedModel,
        phi: TestFunction,
        grid: TimeGrid,
        dual_grid: DualGridConfig,
        cfg: CorrectorConfig,
        stream: RngStream,
        sampler: Optional[InvariantSamplerConfig] = None,
        with_residual: bool = False,
        workers: int = 1,
) -> Tuple[CorrectorScaling, List[CorrectorTrace]]:
    """Mean |psi_hat_0| at eps and eps/2 over probe points and observation records.

    Both epsilons see the same observation records; fast paths are sampled
    once per probe point and epsilon and reused for every record.
    """
    eps = model.epsilon
    models = [model, model.with_epsilon(eps / 2.0)]
    points = [tuple(p) for p in cfg.probe_points]

    if sampler is not None:
        for i, (x, _) in enumerate(points):
            certify_centering(model, homog, np.array([x]), sampler, stream.child("centering", i))

    def profile_for(job):
        level, index = job
        return fast_lag_profile(
            models[level], homog, points[index], grid, cfg, stream.child("fast_paths", index)
        )

    jobs = [(level, index) for level in range(2) for index in range(len(points))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            profiles = list(pool.map(profile_for, jobs))
    else:
        profiles = [profile_for(job) for job in jobs]
    by_level = [profiles[: len(points)], profiles[len(points):]]

    psi_abs = [[], []]
    residual_abs = [[], []]
    traces: List[CorrectorTrace] = []
    for o in range(cfg.observation_paths):
        bundle = simulate_joint(model, grid, stream.child("observation", o))
        v0 = solve_averaged_dual(homog, model.alpha, phi, bundle.dY, grid, dual_grid)
        for level in range(2):
            level_traces = [corrector_from_profile(p, v0, bundle.dY, grid) for p in by_level[level]]
            psi_abs[level].extend(abs(t.psi[0]) for t in level_traces)
            if o == 0:
                traces.extend(level_traces)
            if with_residual:
                vfull = solve_full_dual(models[level], phi, bundle.dY, grid, dual_grid)
                residual_abs[level].extend(np.abs(expansion_residual(vfull, v0, level_traces)))

    mean_psi = [float(np.mean(v)) for v in psi_abs]
    ratio = mean_psi[0] / mean_psi[1] if mean_psi[1] > 0.0 else math.inf
    lo, hi = cfg.band
    scaling = CorrectorScaling(
        epsilon=eps,
        mean_abs_psi=mean_psi[0],
        mean_abs_psi_half=mean_psi[1],
        ratio=ratio,
        band=(lo, hi),
        passed=lo <= ratio <= hi,
    )
    if with_residual:
        mean_res = [float(np.mean(v)) for v in residual_abs]
        scaling.mean_abs_residual = mean_res[0]
        scaling.mean_abs_residual_half = mean_res[1]
        scaling.residual_ratio = mean_res[0] / mean_res[1] if mean_res[1] > 0.0 else math.inf
    logger.info(
        f"Corrector scaling eps={eps:g}: mean|psi| {mean_psi[0]:.4g} vs {mean_psi[1]:.4g} "
        f"(ratio {ratio:.3f}, band [{lo:g}, {hi:g}])"
    )
    if not scaling.passed:
        logger.warning(f"Corrector ratio {ratio:.3f} outside [{lo:g}, {hi:g}]")
    return scaling, traces


def write_corrector_trace(trace: CorrectorTrace, path: Union[str, Path]) -> Path:
    """CSV t,psi_hat,se."""
    rows = ([t, p, s] for t, p, s in zip(trace.times, trace.psi, trace.se))
    return write_csv(path, ["t", "psi_hat", "se"], rows)
