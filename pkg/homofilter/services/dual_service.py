"""Explicit grid solvers for the backward dual equations (m = n = 1).

Each backward step t_{k+1} -> t_k applies the signal generator to v_{k+1}
(subcycled for stability) and adds the observation term

    v_{k+1} <h, dY_k> + d_x v_{k+1} <alpha sigma*, dY_k>

evaluated at the later time point. Space derivatives are central in the
interior; at the truncated boundaries the first derivative is one-sided and
the second derivative is zero (linear extrapolation).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import RegularGridInterpolator

from homofilter.config import settings
from homofilter.exceptions import ConfigError, DualCostError, DualStabilityError, FilterError
from homofilter.models.experiment import DualConfig
from homofilter.models.reports import DualityCheck
from homofilter.services.averaging_service import HomogenizedModel
from homofilter.services.filter_service import FilterRun
from homofilter.services.function_family import TestFunction
from homofilter.services.model_service import InitialLaw, MultiscaleModel
from homofilter.services.simulation_service import TimeGrid
from homofilter.utils.csv_utils import write_csv

logger = logging.getLogger(__name__)

# Courant number targeted by the automatic substep count
SAFETY = 0.9


@dataclass(frozen=True)
class DualGridConfig:
    """Truncated domain and resolution of a dual solve."""

    x_bounds: Tuple[float, float] = (-6.0, 6.0)
    x_nodes: int = 121
    z_bounds: Tuple[float, float] = (-6.0, 6.0)
    z_nodes: int = 61
    substeps: int = 0

    def __post_init__(self):
        for lo, hi in (self.x_bounds, self.z_bounds):
            if not lo < hi:
                raise ConfigError(f"grid bounds must be strictly ordered, got ({lo}, {hi})")
        if self.x_nodes < 5 or self.z_nodes < 5:
            raise ConfigError("dual grids need at least 5 nodes per axis")

    @classmethod
    def from_config(cls, cfg: DualConfig) -> "DualGridConfig":
        return cls(
            x_bounds=tuple(cfg.x_bounds),
            x_nodes=cfg.x_nodes,
            z_bounds=tuple(cfg.z_bounds),
            z_nodes=cfg.z_nodes,
            substeps=cfg.substeps,
        )

    @property
    def x_axis(self) -> np.ndarray:
        return np.linspace(self.x_bounds[0], self.x_bounds[1], self.x_nodes)

    @property
    def z_axis(self) -> np.ndarray:
        return np.linspace(self.z_bounds[0], self.z_bounds[1], self.z_nodes)

    def widened(self, factor: int = 2) -> "DualGridConfig":
        """Same pitch on a domain `factor` times as wide around the same center."""

        def widen(bounds, nodes):
            center = 0.5 * (bounds[0] + bounds[1])
            half = 0.5 * (bounds[1] - bounds[0]) * factor
            return (center - half, center + half), (nodes - 1) * factor + 1

        xb, xn = widen(self.x_bounds, self.x_nodes)
        zb, zn = widen(self.z_bounds, self.z_nodes)
        return DualGridConfig(x_bounds=xb, x_nodes=xn, z_bounds=zb, z_nodes=zn, substeps=self.substeps)


def first_derivative(v: np.ndarray, pitch: float, axis: int = 0) -> np.ndarray:
    """Central differences inside, one-sided at both ends."""
    v = np.moveaxis(v, axis, 0)
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (2.0 * pitch)
    d[0] = (v[1] - v[0]) / pitch
    d[-1] = (v[-1] - v[-2]) / pitch
    return np.moveaxis(d, 0, axis)


def second_derivative(v: np.ndarray, pitch: float, axis: int = 0) -> np.ndarray:
    """Central second differences inside, zero at both ends."""
    v = np.moveaxis(v, axis, 0)
    d = np.zeros_like(v)
    d[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (pitch * pitch)
    return np.moveaxis(d, 0, axis)


@dataclass
class GridFunction:
    """Values of a dual field at one time on a uniform x or x-by-z grid."""

    t: float
    x_axis: np.ndarray
    values: np.ndarray
    z_axis: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x_axis.size < 2 or not np.all(np.diff(self.x_axis) > 0):
            raise ValueError("x axis must be strictly increasing")
        if self.z_axis is not None and (self.z_axis.size < 2 or not np.all(np.diff(self.z_axis) > 0)):
            raise ValueError("z axis must be strictly increasing")

    @property
    def x_pitch(self) -> float:
        return float(self.x_axis[1] - self.x_axis[0])

    @property
    def z_pitch(self) -> Optional[float]:
        return None if self.z_axis is None else float(self.z_axis[1] - self.z_axis[0])

    def evaluate(self, x: np.ndarray, z: Optional[np.ndarray] = None) -> np.ndarray:
        """Linear interpolation, clamped to the grid box."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.z_axis is None:
            return np.interp(x, self.x_axis, self.values)
        z = np.asarray(z, dtype=float).reshape(-1)
        points = np.column_stack([
            np.clip(x, self.x_axis[0], self.x_axis[-1]),
            np.clip(z, self.z_axis[0], self.z_axis[-1]),
        ])
        interp = RegularGridInterpolator((self.x_axis, self.z_axis), self.values, method="linear")
        return interp(points)

    def derivatives(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """v, d_x v and d_xx v at points x (one-dimensional fields only)."""
        if self.z_axis is not None:
            raise ValueError("derivatives are only provided for fields of x alone")
        x = np.asarray(x, dtype=float).reshape(-1)
        h = self.x_pitch
        return (
            np.interp(x, self.x_axis, self.values),
            np.interp(x, self.x_axis, first_derivative(self.values, h)),
            np.interp(x, self.x_axis, second_derivative(self.values, h)),
        )


@dataclass
class DualSolveResult:
    """Backward solution v_k, k = 0..N, with v_N = phi on the grid."""

    label: str
    times: np.ndarray
    x_axis: np.ndarray
    values: np.ndarray  # (N+1, nx) or (N+1, nx, nz)
    substeps: int
    courant: float
    dY: np.ndarray
    z_axis: Optional[np.ndarray] = None
    epsilon: Optional[float] = None
    phi_label: str = ""

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    def snapshot(self, step: int) -> GridFunction:
        return GridFunction(
            t=float(self.times[step]),
            x_axis=self.x_axis,
            values=self.values[step],
            z_axis=self.z_axis,
        )

    def evaluate(self, step: int, x: np.ndarray, z: Optional[np.ndarray] = None) -> np.ndarray:
        return self.snapshot(step).evaluate(x, z)


def _substep_count(rate: float, dt: float, requested: int) -> int:
    """Substeps so that dt_s * rate <= SAFETY; a fixed request is checked instead."""
    if rate <= 0.0:
        return max(1, requested)
    if requested > 0:
        if dt / requested * rate > 1.0:
            suggested = SAFETY * requested / rate
            raise DualStabilityError(
                f"explicit dual step unstable: Courant number {dt / requested * rate:.3g} > 1 "
                f"with {requested} substeps",
                suggested_dt=suggested,
            )
        return requested
    return max(1, math.ceil(dt * rate / SAFETY))


def _check_finite(values: np.ndarray, step: int, dt: float) -> None:
    if not np.all(np.isfinite(values)):
        raise DualStabilityError(f"dual solution became non-finite at step {step}", suggested_dt=dt / 2.0)


def _sweep(
        terminal: np.ndarray,
        generator: Callable[[np.ndarray], np.ndarray],
        observation: Callable[[np.ndarray, int], np.ndarray],
        grid: TimeGrid,
        substeps: int,
) -> np.ndarray:
    N, dt = grid.n_steps, grid.dt
    dt_s = dt / substeps
    values = np.empty((N + 1,) + terminal.shape)
    values[N] = terminal
    for k in range(N - 1, -1, -1):
        later = values[k + 1]
        v = later
        for _ in range(substeps):
            v = v + dt_s * generator(v)
        values[k] = v + observation(later, k)
        _check_finite(values[k], k, dt)
    return values


def solve_averaged_dual(
        homog: HomogenizedModel,
        alpha: np.ndarray,
        phi: TestFunction,
        dY: np.ndarray,
        grid: TimeGrid,
        dual_grid: DualGridConfig,
) -> DualSolveResult:
    """Backward sweep for v0 on the x grid."""
    if homog.m != 1:
        raise ConfigError(f"the grid dual solver needs m = 1, got m = {homog.m}")
    if dY.shape[0] != grid.n_steps:
        raise ValueError(f"observation has {dY.shape[0]} increments, grid has {grid.n_steps} steps")
    alpha = np.asarray(alpha, dtype=float)
    x = dual_grid.x_axis
    X = x.reshape(-1, 1)
    dx = float(x[1] - x[0])

    b = homog.bbar(X)[:, 0]
    a = homog.abar(X)[:, 0, 0]
    h = homog.hbar(X)
    c = homog.sigbar(X)[:, 0, :] @ alpha.T

    rate = float(np.max(a / dx ** 2 + np.abs(b) / dx))
    substeps = _substep_count(rate, grid.dt, dual_grid.substeps)
    hY = h @ dY.T  # (nx, N)
    cY = c @ dY.T

    def generator(v):
        return b * first_derivative(v, dx) + 0.5 * a * second_derivative(v, dx)

    def observation(v, k):
        return v * hY[:, k] + first_derivative(v, dx) * cY[:, k]

    values = _sweep(phi.value(X), generator, observation, grid, substeps)
    logger.debug(f"Averaged dual solved with {substeps} substep(s), {x.size} nodes")
    return DualSolveResult(
        label="averaged",
        times=grid.times,
        x_axis=x,
        values=values,
        substeps=substeps,
        courant=grid.dt / substeps * rate,
        dY=dY,
        phi_label=phi.label,
    )


def solve_full_dual(
        model: MultiscaleModel,
        phi: TestFunction,
        dY: np.ndarray,
        grid: TimeGrid,
        dual_grid: DualGridConfig,
        budget: Optional[float] = None,
) -> DualSolveResult:
    """Backward sweep for v^eps on the x-by-z grid, fast generator scaled by 1/eps^2."""
    if model.m != 1 or model.n != 1:
        raise ConfigError(f"the grid dual solver needs m = n = 1, got m = {model.m}, n = {model.n}")
    if dY.shape[0] != grid.n_steps:
        raise ValueError(f"observation has {dY.shape[0]} increments, grid has {grid.n_steps} steps")
    budget = budget if budget is not None else settings.DUAL_COST_BUDGET
    x, z = dual_grid.x_axis, dual_grid.z_axis
    dx, dz = float(x[1] - x[0]), float(z[1] - z[0])
    nx, nz = x.size, z.size
    XX, ZZ = np.meshgrid(x, z, indexing="ij")
    X, Z = XX.reshape(-1, 1), ZZ.reshape(-1, 1)
    inv_eps2 = 1.0 / model.epsilon ** 2

    def on_grid(values):
        return values.reshape((nx, nz) + values.shape[1:])

    b = on_grid(model.b(X, Z)[:, 0])
    sig = model.sigma(X, Z)
    a = on_grid(np.einsum("pj,pj->p", sig[:, 0, :], sig[:, 0, :]))
    f = on_grid(model.f(X, Z)[:, 0])
    g = model.g(X, Z)
    gg = on_grid(np.einsum("pj,pj->p", g[:, 0, :], g[:, 0, :]))
    h = on_grid(model.h(X, Z))  # (nx, nz, d)
    c = on_grid(sig[:, 0, :] @ model.alpha.T)

    rate = float(np.max(
        a / dx ** 2 + np.abs(b) / dx + inv_eps2 * (gg / dz ** 2 + np.abs(f) / dz)
    ))
    substeps = _substep_count(rate, grid.dt, dual_grid.substeps)
    cost = float(nx) * nz * substeps * grid.n_steps
    if cost > budget:
        raise DualCostError(
            f"full dual needs {cost:.3g} node-substeps, budget is {budget:.3g}",
            suggestion="raise epsilon, coarsen the grid or raise HOMOFILTER_DUAL_COST_BUDGET",
        )
    hY = np.einsum("xzd,kd->xzk", h, dY)
    cY = np.einsum("xzd,kd->xzk", c, dY)

    def generator(v):
        slow = b * first_derivative(v, dx, 0) + 0.5 * a * second_derivative(v, dx, 0)
        fast = f * first_derivative(v, dz, 1) + 0.5 * gg * second_derivative(v, dz, 1)
        return slow + inv_eps2 * fast

    def observation(v, k):
        return v * hY[:, :, k] + first_derivative(v, dx, 0) * cY[:, :, k]

    terminal = np.repeat(phi.value(x.reshape(-1, 1)).reshape(nx, 1), nz, axis=1)
    values = _sweep(terminal, generator, observation, grid, substeps)
    logger.debug(f"Full dual solved with {substeps} substep(s) on {nx}x{nz} nodes, eps={model.epsilon}")
    return DualSolveResult(
        label="full",
        times=grid.times,
        x_axis=x,
        z_axis=z,
        values=values,
        substeps=substeps,
        courant=grid.dt / substeps * rate,
        dY=dY,
        epsilon=model.epsilon,
        phi_label=phi.label,
    )


def _gauss_nodes(mean: float, std: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = hermegauss(order)
    return mean + std * nodes, weights / math.sqrt(2.0 * math.pi)


def initial_law_value(result: DualSolveResult, initial_law: InitialLaw, order: int = 40) -> float:
    """Integral of v_0 against the initial law by Gauss-Hermite quadrature."""
    xs, xw = _gauss_nodes(float(initial_law.x_mean[0]), float(initial_law.x_std[0]), order)
    if result.z_axis is None:
        return float(np.sum(xw * result.evaluate(0, xs)))
    zs, zw = _gauss_nodes(float(initial_law.z_mean[0]), float(initial_law.z_std[0]), order)
    XX, ZZ = np.meshgrid(xs, zs, indexing="ij")
    values = result.evaluate(0, XX.reshape(-1), ZZ.reshape(-1)).reshape(XX.shape)
    return float(xw @ values @ zw)


def duality_drift(
        result: DualSolveResult,
        run: FilterRun,
        steps: Sequence[int],
        initial_law: InitialLaw,
        tolerance: float = 0.02,
) -> DualityCheck:
    """rho_hat_t(v_t) / rho_hat_0(v_0) - 1 from clouds recorded by the filter run."""
    pairing: List[float] = []
    for step in steps:
        if step not in run.clouds:
            raise FilterError(f"filter run did not record its cloud at step {step}", step=step)
        cloud = run.clouds[step]
        z = None if result.z_axis is None else cloud.z[:, 0]
        values = result.evaluate(step, cloud.x[:, 0], z)
        _, rho = cloud.estimate(values.reshape(1, -1))
        pairing.append(float(rho[0]))

    base = pairing[0]
    drift = [p / base - 1.0 for p in pairing] if base != 0.0 else [math.inf] * len(pairing)
    law_value = initial_law_value(result, initial_law)
    gap = abs(base - law_value) / abs(law_value) if law_value != 0.0 else math.inf
    worst = float(max(abs(d) for d in drift))
    check = DualityCheck(
        label=result.label,
        times=[float(result.times[s]) for s in steps],
        pairing=pairing,
        relative_drift=drift,
        max_abs_drift=worst,
        initial_law_value=law_value,
        initial_law_gap=gap,
        tolerance=tolerance,
        passed=worst <= tolerance,
    )
    if not check.passed:
        logger.warning(f"Duality drift for the {result.label} pair is {worst:.3%} > {tolerance:.1%}")
    return check


def boundary_influence(
        solve: Callable[[DualGridConfig], DualSolveResult],
        dual_grid: DualGridConfig,
        probe_x: Sequence[float],
        probe_z: Optional[Sequence[float]] = None,
        tolerance: float = 0.005,
) -> float:
    """Largest change of v_0 at the probes when the domain is doubled."""
    base = solve(dual_grid)
    wide = solve(dual_grid.widened(2))
    z = None if probe_z is None else np.asarray(probe_z, dtype=float)
    x = np.asarray(probe_x, dtype=float)
    change = float(np.max(np.abs(base.evaluate(0, x, z) - wide.evaluate(0, x, z))))
    if change > tolerance:
        logger.warning(
            f"Boundary influence on the {base.label} dual is {change:.3g} > {tolerance:g}; widen the domain"
        )
    return change


def write_dual_snapshots(
        result: DualSolveResult,
        path: Union[str, Path],
        steps: Optional[Sequence[int]] = None,
) -> Path:
    """CSV t,x[,z],v for the requested steps (default: first and last)."""
    steps = list(steps) if steps is not None else [0, result.n_steps]
    if result.z_axis is None:
        header = ["t", "x", "v"]
        rows = (
            [result.times[k], xv, result.values[k, i]]
            for k in steps
            for i, xv in enumerate(result.x_axis)
        )
    else:
        header = ["t", "x", "z", "v"]
        rows = (
            [result.times[k], xv, zv, result.values[k, i, j]]
            for k in steps
            for i, xv in enumerate(result.x_axis)
            for j, zv in enumerate(result.z_axis)
        )
    return write_csv(path, header, rows)
