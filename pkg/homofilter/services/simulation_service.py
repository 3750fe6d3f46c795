"""Euler-Maruyama simulation of the slow-fast signal and the observation.

The fast component is subcycled with substep dt / ceil(dt / (c_f eps^2)) while
the slow state is frozen at the left end of the coarse step.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from homofilter.config import settings
from homofilter.exceptions import SimulationError
from homofilter.services.model_service import MultiscaleModel
from homofilter.services.random_streams import RngStream
from homofilter.utils.csv_utils import write_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    """Coarse grid with N chosen first and dt = T / N."""

    horizon: float
    n_steps: int
    fast_factor: float = settings.FAST_FACTOR

    def __post_init__(self):
        if self.horizon <= 0.0 or self.n_steps < 1:
            raise ValueError("TimeGrid needs a positive horizon and at least one step")
        if not 0.0 < self.fast_factor <= 1.0:
            raise ValueError("fast_factor must lie in (0, 1]")

    @classmethod
    def from_step(cls, horizon: float, dt: float, fast_factor: Optional[float] = None) -> "TimeGrid":
        return cls(
            horizon=horizon,
            n_steps=max(1, int(round(horizon / dt))),
            fast_factor=fast_factor if fast_factor is not None else settings.FAST_FACTOR,
        )

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        times = np.arange(self.n_steps + 1) * self.dt
        times[-1] = self.horizon
        return times

    def fast_substeps(self, epsilon: float) -> int:
        limit = self.fast_factor * epsilon ** 2
        count = max(1, math.ceil(self.dt / limit))
        while self.dt / count > limit:
            count += 1
        return count

    def fast_dt(self, epsilon: float) -> float:
        return self.dt / self.fast_substeps(epsilon)

    def step_of(self, t: float) -> int:
        """Index of the grid time nearest to t."""
        return int(round(t / self.dt))

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor, self.fast_factor)


@dataclass
class PathBundle:
    """One realization of the signal and observation on a TimeGrid."""

    times: np.ndarray
    x: np.ndarray  # (N+1, m)
    z: np.ndarray  # (N+1, n)
    y: np.ndarray  # (N+1, d), y[0] = 0
    dY: np.ndarray  # (N, d)
    dW: np.ndarray  # (N, w)
    dU: np.ndarray  # (N, u)
    dV: np.ndarray  # (N, substeps, v)
    epsilon: float
    dt: float
    seed: int
    stream_id: str

    def reconstruction_residual(self, model: MultiscaleModel) -> float:
        """max |dY_k - (h(X_k, Z_k) dt + alpha dW_k + gamma dU_k)| from stored data."""
        h = model.h(self.x[:-1], self.z[:-1])
        rebuilt = _observation_increment(h, self.dt, self.dW, self.dU, model.alpha, model.gamma)
        return float(np.max(np.abs(rebuilt - self.dY))) if self.dY.size else 0.0


def _observation_increment(h, dt, dW, dU, alpha, gamma):
    return h * dt + (dW @ alpha.T + dU @ gamma.T)


def _check_finite(values: np.ndarray, step: int, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise SimulationError(
            f"non-finite {what} at step {step}",
            step=step,
            suggestion="reduce the fast factor c_f or the time step",
        )


def fast_substep(model: MultiscaleModel, x: np.ndarray, z: np.ndarray, dt: float,
                 dV: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """One Euler step of dZ = f/scale^2 dt + g/scale dV with x frozen."""
    drift = model.f(x, z)
    diffusion = model.g(x, z)
    return z + drift * (dt / scale ** 2) + np.einsum("pij,pj->pi", diffusion, dV) / scale


def simulate_joint(model: MultiscaleModel, grid: TimeGrid, stream: RngStream) -> PathBundle:
    """Simulate (X, Z, Y) on the grid; Y is built from the same dW that drives X."""
    rng = stream.generator()
    N, dt, eps = grid.n_steps, grid.dt, model.epsilon
    substeps = grid.fast_substeps(eps)
    dt_fast = dt / substeps
    dims = model.dims

    # W and U are drawn before V so that they do not depend on epsilon
    dW = math.sqrt(dt) * rng.standard_normal((N, dims.w))
    dU = math.sqrt(dt) * rng.standard_normal((N, dims.u))
    x0, z0 = model.initial_law.sample(1, rng)
    dV = math.sqrt(dt_fast) * rng.standard_normal((N, substeps, dims.v))

    x = np.empty((N + 1, dims.m))
    z = np.empty((N + 1, dims.n))
    x[0], z[0] = x0[0], z0[0]

    for k in range(N):
        xk, zk = x[k:k + 1], z[k:k + 1]
        sigma = model.sigma(xk, zk)
        x[k + 1] = (xk + model.b(xk, zk) * dt + np.einsum("pij,j->pi", sigma, dW[k]))[0]
        zn = zk
        for j in range(substeps):
            zn = fast_substep(model, xk, zn, dt_fast, dV[k, j:j + 1], scale=eps)
        z[k + 1] = zn[0]
        _check_finite(x[k + 1], k, "slow state")
        _check_finite(z[k + 1], k, "fast state")

    # Same batched evaluation as reconstruction_residual, so the identity is exact
    dY = _observation_increment(model.h(x[:-1], z[:-1]), dt, dW, dU, model.alpha, model.gamma)
    _check_finite(dY, N - 1, "observation")
    y = np.vstack([np.zeros((1, dims.d)), np.cumsum(dY, axis=0)])
    logger.debug(f"Simulated joint path ({N} steps, {substeps} fast substeps) stream {stream.stream_id}")
    return PathBundle(
        times=grid.times, x=x, z=z, y=y, dY=dY, dW=dW, dU=dU, dV=dV,
        epsilon=eps, dt=dt, seed=stream.seed, stream_id=stream.stream_id,
    )


def simulate_frozen_fast(
        model: MultiscaleModel,
        x: np.ndarray,
        z0: np.ndarray,
        steps: int,
        dt: float,
        stream: Union[RngStream, np.random.Generator],
) -> np.ndarray:
    """Path of dZ = f(x, Z) dt + g(x, Z) dV with x frozen (order-one time scale).

    z0 of shape (n,) gives a path (steps+1, n); z0 of shape (chains, n) gives
    (steps+1, chains, n) with the chains advanced in lockstep.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    rng = stream.generator() if isinstance(stream, RngStream) else stream
    single = np.ndim(z0) == 1
    z = np.atleast_2d(np.asarray(z0, dtype=float)).copy()
    chains = z.shape[0]
    xb = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, -1), (chains, model.m))

    path = np.empty((steps + 1, chains, model.n))
    path[0] = z
    sq = math.sqrt(dt)
    for k in range(steps):
        dV = sq * rng.standard_normal((chains, model.dims.v))
        z = fast_substep(model, xb, z, dt, dV)
        _check_finite(z, k, "frozen fast state")
        path[k + 1] = z
    return path[:, 0, :] if single else path


def propagate_full_particles(
        model: MultiscaleModel,
        x: np.ndarray,
        z: np.ndarray,
        dY_k: np.ndarray,
        dt: float,
        substeps: int,
        rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """One coarse step of the signal under the reference measure.

    W = alpha* Y + Gamma W_perp, with the drift b - sigma alpha* h so that
    reweighting by exp(<h, dY> - |h|^2 dt / 2) recovers the signal law.
    """
    count = x.shape[0]
    dims = model.dims
    dW_perp = math.sqrt(dt) * rng.standard_normal((count, dims.w))
    dW = dY_k @ model.alpha + dW_perp @ model.gamma_perp.T

    sigma = model.sigma(x, z)
    h = model.h(x, z)
    correction = np.einsum("pij,pj->pi", sigma, h @ model.alpha)
    x_new = x + (model.b(x, z) - correction) * dt + np.einsum("pij,pj->pi", sigma, dW)

    dt_fast = dt / substeps
    dV = math.sqrt(dt_fast) * rng.standard_normal((substeps, count, dims.v))
    z_new = z
    for j in range(substeps):
        z_new = fast_substep(model, x, z_new, dt_fast, dV[j], scale=model.epsilon)
    return x_new, z_new


def resimulate_with_observation(
        model: MultiscaleModel,
        grid: TimeGrid,
        stream: RngStream,
        dY: np.ndarray,
        particles: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Signal paths under the reference measure driven by a given observation record.

    Returns x of shape (N+1, particles, m) and z of shape (N+1, particles, n).
    """
    if dY.shape[0] != grid.n_steps:
        raise ValueError(f"observation has {dY.shape[0]} increments, grid has {grid.n_steps} steps")
    rng = stream.generator()
    substeps = grid.fast_substeps(model.epsilon)
    x0, z0 = model.initial_law.sample(particles, rng)
    xs = np.empty((grid.n_steps + 1, particles, model.m))
    zs = np.empty((grid.n_steps + 1, particles, model.n))
    xs[0], zs[0] = x0, z0
    for k in range(grid.n_steps):
        xs[k + 1], zs[k + 1] = propagate_full_particles(
            model, xs[k], zs[k], dY[k], grid.dt, substeps, rng
        )
        _check_finite(xs[k + 1], k, "particle slow state")
        _check_finite(zs[k + 1], k, "particle fast state")
    return xs, zs


def write_path_csv(bundle: PathBundle, path: Union[str, Path]) -> Path:
    """CSV with header t,x1..xm,z1..zn,y1..yd, one row per coarse time."""
    m, n, d = bundle.x.shape[1], bundle.z.shape[1], bundle.y.shape[1]
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(m)]
        + [f"z{i + 1}" for i in range(n)]
        + [f"y{i + 1}" for i in range(d)]
    )
    rows = (
        [bundle.times[k], *bundle.x[k], *bundle.z[k], *bundle.y[k]]
        for k in range(len(bundle.times))
    )
    return write_csv(path, header, rows)
