"""Weighted particle filters for the full and the homogenized signal.

Both filters realize the Kallianpur-Striebel formula under the reference
measure: particles move with the observation-correlated part of W fixed by the
observed increments, and carry log-weights

    l_i += <h(x_i), dY_k> - |h(x_i)|^2 dt / 2

evaluated at the left end of each step. Weights stay in the log domain; the
accumulated normalizer Lambda absorbs the mean weight at every resampling so
that rho(1) = exp(Lambda) * mean(exp(l_i)) is carried through unchanged.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from homofilter.config import settings
from homofilter.exceptions import FilterError
from homofilter.services.averaging_service import HomogenizedModel
from homofilter.services.function_family import TestFunction, evaluate_family
from homofilter.services.model_service import InitialLaw, MultiscaleModel
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, propagate_full_particles
from homofilter.utils.csv_utils import write_csv
from homofilter.utils.linalg import psd_sqrt

logger = logging.getLogger(__name__)


def log_mean_exp(log_weights: np.ndarray) -> float:
    """log(mean(exp(l))) with the max shifted out and an exactly rounded sum."""
    top = float(np.max(log_weights))
    if not math.isfinite(top):
        return top
    total = math.fsum(np.exp(log_weights - top))
    return top + math.log(total / log_weights.size)


def effective_sample_size(log_weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2, clipped to [1, N]."""
    ess = math.exp(2.0 * logsumexp(log_weights) - logsumexp(2.0 * log_weights))
    return float(min(max(ess, 1.0), log_weights.size))


@dataclass
class ParticleCloud:
    """Particle states with log-weights and the accumulated log-normalizer."""

    x: np.ndarray  # (P, m)
    log_weights: np.ndarray  # (P,)
    log_norm: float = 0.0
    z: Optional[np.ndarray] = None  # (P, n), full filter only

    @property
    def size(self) -> int:
        return self.log_weights.size

    def _shifted(self) -> Tuple[float, np.ndarray]:
        top = float(np.max(self.log_weights))
        if not math.isfinite(top):
            raise FilterError(f"log-weights degenerate (max = {top})")
        return top, np.exp(self.log_weights - top)

    @property
    def log_rho1(self) -> float:
        top, w = self._shifted()
        return self.log_norm + top + math.log(math.fsum(w) / self.size)

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights)

    def normalized_weights(self) -> np.ndarray:
        _, w = self._shifted()
        return w / math.fsum(w)

    def estimate(self, values: np.ndarray, bounds: Optional[Sequence[float]] = None):
        """(pi_hat, rho_hat) for stacked function values (K, P).

        pi_hat = sum w phi / sum w with both sums exactly rounded, so phi = 1
        gives exactly 1. Estimates beyond the function bounds are logged and
        returned as computed.
        """
        values = np.atleast_2d(values)
        _, w = self._shifted()
        total = math.fsum(w)
        sums = np.array([math.fsum(w * row) for row in values])
        pi = sums / total
        if bounds is not None:
            limit = np.asarray(bounds, dtype=float)
            over = np.flatnonzero(np.abs(pi) > limit)
            if over.size:
                logger.warning(
                    f"estimate exceeds function bound for rows {over.tolist()}: "
                    f"{pi[over].tolist()} vs {np.broadcast_to(limit, pi.shape)[over].tolist()}"
                )
        rho = pi * math.exp(self.log_rho1)
        return pi, rho

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(
            x=self.x.copy(),
            log_weights=self.log_weights.copy(),
            log_norm=self.log_norm,
            z=None if self.z is None else self.z.copy(),
        )


def resample_systematic(
        cloud: ParticleCloud,
        threshold: float,
        rng: np.random.Generator,
) -> Tuple[ParticleCloud, Optional[np.ndarray]]:
    """Systematic resampling when ESS < threshold * N.

    Returns the (possibly new) cloud and the ancestor indices, or None when no
    resampling happened. The new cloud has zero log-weights and
    Lambda = log rho_hat(1) of the old one.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("resampling threshold must lie in (0, 1]")
    count = cloud.size
    if cloud.ess >= threshold * count:
        return cloud, None

    log_rho1 = cloud.log_rho1
    cdf = np.cumsum(cloud.normalized_weights())
    cdf[-1] = 1.0
    u = (rng.uniform() + np.arange(count)) / count
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), count - 1)
    resampled = ParticleCloud(
        x=cloud.x[idx],
        log_weights=np.zeros(count),
        log_norm=log_rho1,
        z=None if cloud.z is None else cloud.z[idx],
    )
    return resampled, idx


@dataclass
class FilterEstimate:
    """Filter output at one grid time."""

    t: float
    step: int
    pi: np.ndarray  # (K,)
    rho: np.ndarray  # (K,)
    log_rho1: float
    ess: float

    @property
    def rho1(self) -> float:
        return math.exp(self.log_rho1)


@dataclass
class FilterRun:
    """Estimates at the checkpoints plus diagnostics of one filter pass."""

    label: str
    estimates: List[FilterEstimate]
    ess_trace: np.ndarray  # (N+1,)
    resample_count: int
    cloud: ParticleCloud
    clouds: Dict[int, ParticleCloud] = field(default_factory=dict)
    max_abs_log_weight: float = 0.0
    weight_bound: float = 0.0

    @property
    def final(self) -> FilterEstimate:
        return self.estimates[-1]

    def estimate_at(self, step: int) -> FilterEstimate:
        for est in self.estimates:
            if est.step == step:
                return est
        raise KeyError(f"no estimate recorded at step {step}")

    @property
    def inverse_rho1(self) -> float:
        """rho_hat_T(1)^-1, the inverse-moment diagnostic."""
        return math.exp(-self.final.log_rho1)


# propagate(x, z, h, dY_k, rng) -> (x, z); observe(x, z) -> h
Propagator = Callable[[np.ndarray, Optional[np.ndarray], np.ndarray, np.ndarray, np.random.Generator],
                      Tuple[np.ndarray, Optional[np.ndarray]]]
Observer = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


def _run_particles(
        label: str,
        x0: np.ndarray,
        z0: Optional[np.ndarray],
        observe: Observer,
        propagate: Propagator,
        dY: np.ndarray,
        grid: TimeGrid,
        rng: np.random.Generator,
        functions: Sequence[TestFunction],
        checkpoints: Optional[Iterable[int]],
        resampling: bool,
        threshold: Optional[float],
        record_clouds: Iterable[int],
) -> FilterRun:
    N, dt = grid.n_steps, grid.dt
    if dY.shape[0] != N:
        raise ValueError(f"observation has {dY.shape[0]} increments, grid has {N} steps")
    count = x0.shape[0]
    if count < 2:
        raise ValueError("a particle filter needs at least two particles")
    threshold = threshold if threshold is not None else settings.RESAMPLE_THRESHOLD
    steps = sorted(set(checkpoints)) if checkpoints is not None else [N]
    if any(not 0 <= s <= N for s in steps):
        raise ValueError(f"checkpoints must lie in [0, {N}]")
    wanted = set(steps)
    record = set(record_clouds)
    bounds = [phi.bound for phi in functions]
    times = grid.times

    cloud = ParticleCloud(x=x0, log_weights=np.zeros(count), z=z0)
    ancestral = np.zeros(count)
    h_sup = 0.0
    variation = 0.0
    ess_trace = np.empty(N + 1)
    ess_trace[0] = float(count)
    estimates: List[FilterEstimate] = []
    clouds: Dict[int, ParticleCloud] = {}
    resample_count = 0

    def checkpoint(step: int):
        if step in wanted:
            pi, rho = cloud.estimate(evaluate_family(functions, cloud.x), bounds)
            estimates.append(FilterEstimate(
                t=float(times[step]), step=step, pi=pi, rho=rho,
                log_rho1=cloud.log_rho1, ess=ess_trace[step],
            ))
        if step in record:
            clouds[step] = cloud.copy()

    checkpoint(0)
    for k in range(N):
        h = observe(cloud.x, cloud.z)
        increment = h @ dY[k] - 0.5 * np.sum(h * h, axis=1) * dt
        bad = np.flatnonzero(~np.isfinite(increment))
        if bad.size:
            raise FilterError("non-finite log-weight increment", step=k, particle=int(bad[0]))
        h_sup = max(h_sup, float(np.max(np.linalg.norm(h, axis=1))))
        variation += float(np.linalg.norm(dY[k]))
        ancestral += increment

        x_new, z_new = propagate(cloud.x, cloud.z, h, dY[k], rng)
        bad = np.flatnonzero(~np.all(np.isfinite(x_new), axis=1))
        if z_new is not None and not bad.size:
            bad = np.flatnonzero(~np.all(np.isfinite(z_new), axis=1))
        if bad.size:
            raise FilterError("non-finite particle state", step=k, particle=int(bad[0]))
        cloud = replace(cloud, x=x_new, z=z_new, log_weights=cloud.log_weights + increment)
        if not math.isfinite(float(np.max(cloud.log_weights))):
            raise FilterError("all log-weights are -inf", step=k)

        ess_trace[k + 1] = cloud.ess
        checkpoint(k + 1)
        if resampling and k + 1 < N:
            cloud, idx = resample_systematic(cloud, threshold, rng)
            if idx is not None:
                ancestral = ancestral[idx]
                resample_count += 1

    bound = h_sup * variation + 0.5 * h_sup ** 2 * grid.horizon
    largest = float(np.max(np.abs(ancestral)))
    if not math.isfinite(largest) or largest > bound * (1.0 + 1e-9) + 1e-12:
        raise FilterError(
            f"cumulative log-weight {largest:.6g} exceeds the Girsanov bound {bound:.6g}"
        )
    logger.debug(
        f"{label} filter: {count} particles, {resample_count} resamplings, "
        f"final ESS {ess_trace[-1]:.1f}, log rho(1) {cloud.log_rho1:.6g}"
    )
    return FilterRun(
        label=label,
        estimates=estimates,
        ess_trace=ess_trace,
        resample_count=resample_count,
        cloud=cloud,
        clouds=clouds,
        max_abs_log_weight=largest,
        weight_bound=bound,
    )


def run_full_filter(
        model: MultiscaleModel,
        dY: np.ndarray,
        grid: TimeGrid,
        particles: int,
        stream: RngStream,
        functions: Sequence[TestFunction],
        checkpoints: Optional[Iterable[int]] = None,
        resampling: bool = True,
        threshold: Optional[float] = None,
        record_clouds: Iterable[int] = (),
) -> FilterRun:
    """Particle approximation of the full filter from (x, z) particles.

    The model must be normalized (alpha alpha* + gamma gamma* = I).
    """
    rng = stream.generator()
    x0, z0 = model.initial_law.sample(particles, rng)
    substeps = grid.fast_substeps(model.epsilon)
    dt = grid.dt

    def observe(x, z):
        return model.h(x, z)

    def propagate(x, z, h, dY_k, gen):
        return propagate_full_particles(model, x, z, dY_k, dt, substeps, gen)

    return _run_particles(
        "full", x0, z0, observe, propagate, dY, grid, rng, functions,
        checkpoints, resampling, threshold, record_clouds,
    )


def run_reduced_filter(
        homog: HomogenizedModel,
        alpha: np.ndarray,
        dY: np.ndarray,
        grid: TimeGrid,
        particles: int,
        stream: RngStream,
        initial_law: InitialLaw,
        functions: Sequence[TestFunction],
        checkpoints: Optional[Iterable[int]] = None,
        resampling: bool = True,
        threshold: Optional[float] = None,
        record_clouds: Iterable[int] = (),
) -> FilterRun:
    """Particle approximation of the homogenized filter.

    dX = b_bar dt + L dW_hat + sigma_bar (dW_bar - alpha* h_bar dt) with
    dW_bar = alpha* dY + Gamma dW_perp and Gamma = (I - alpha* alpha)^(1/2).
    """
    alpha = np.asarray(alpha, dtype=float)
    rng = stream.generator()
    x0, _ = initial_law.sample(particles, rng)
    gamma_bar = psd_sqrt(np.eye(alpha.shape[1]) - alpha.T @ alpha)
    dt = grid.dt
    sq = math.sqrt(dt)
    m, w = homog.m, homog.w

    def observe(x, z):
        return homog.hbar(x)

    def propagate(x, z, h, dY_k, gen):
        count = x.shape[0]
        dW_hat = sq * gen.standard_normal((count, m))
        dW_perp = sq * gen.standard_normal((count, w))
        dW_bar = dY_k @ alpha + dW_perp @ gamma_bar.T - (h @ alpha) * dt
        sig = homog.sigbar(x)
        L = homog.diffusion_factor(x)
        x_new = (
            x
            + homog.bbar(x) * dt
            + np.einsum("pij,pj->pi", L, dW_hat)
            + np.einsum("pij,pj->pi", sig, dW_bar)
        )
        return x_new, None

    return _run_particles(
        "reduced", x0, None, observe, propagate, dY, grid, rng, functions,
        checkpoints, resampling, threshold, record_clouds,
    )


def bootstrap_se(
        cloud: ParticleCloud,
        values: np.ndarray,
        n_boot: int = 200,
        stream: Union[RngStream, np.random.Generator, None] = None,
) -> float:
    """Bootstrap standard error of the self-normalized estimate sum w v / sum w."""
    if isinstance(stream, RngStream):
        rng = stream.generator()
    else:
        rng = stream if stream is not None else np.random.default_rng(0)
    w = cloud.normalized_weights()
    values = np.asarray(values, dtype=float)
    idx = rng.integers(0, cloud.size, size=(n_boot, cloud.size))
    ws = w[idx]
    estimates = np.sum(ws * values[idx], axis=1) / np.sum(ws, axis=1)
    return float(np.std(estimates, ddof=1))


def write_filter_trace(run: FilterRun, path: Union[str, Path]) -> Path:
    """CSV t,ess,rho1,pi_phi_1..pi_phi_K, one row per checkpoint."""
    count = run.estimates[0].pi.size if run.estimates else 0
    header = ["t", "ess", "rho1"] + [f"pi_phi_{k + 1}" for k in range(count)]
    rows = ([est.t, est.ess, est.rho1, *est.pi] for est in run.estimates)
    return write_csv(path, header, rows)
