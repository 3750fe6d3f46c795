"""Kalman-Bucy oracle for linear-Gaussian models with correlated noise.

For dX = (A X + c) dt + S dW and dY = (H X + e) dt + alpha dW + gamma dU with
alpha alpha* + gamma gamma* = I, the conditional law is Gaussian with

    dm = (A m + c) dt + G (dY - (H m + e) dt),   G = P H* + S alpha*
    dP = (A P + P A* + S S* - G G*) dt

Mean and covariance are integrated jointly with RK4, the observation
derivative being piecewise constant on the grid.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from homofilter.exceptions import OracleError
from homofilter.services.model_service import MultiscaleModel
from homofilter.services.simulation_service import TimeGrid
from homofilter.utils.linalg import min_eigenvalue, symmetrize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Constant coefficients of a linear-Gaussian signal/observation pair."""

    A: np.ndarray  # (m, m)
    c: np.ndarray  # (m,)
    S: np.ndarray  # (m, w)
    H: np.ndarray  # (d, m)
    e: np.ndarray  # (d,)
    alpha: np.ndarray  # (d, w)
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    @classmethod
    def from_model(cls, model: MultiscaleModel) -> "LinearGaussianSpec":
        """Extract the oracle coefficients; anything not affine in x alone is rejected."""
        m, n = model.m, model.n

        def affine(name: str):
            fld = getattr(model, name)
            parts = fld.linear_parts(m, n)
            if parts is None:
                raise OracleError(
                    f"{name} is not built from the constant or linear families",
                    suggestion="use builtin constant/linear coefficients for oracle studies",
                )
            A, B, c = parts
            if np.any(B != 0.0):
                raise OracleError(f"{name} depends on the fast variable z")
            return A, c

        A, c = affine("b")
        S_lin, S_const = affine("sigma")
        if np.any(S_lin != 0.0):
            raise OracleError("sigma must be constant for the Kalman-Bucy oracle")
        H, e = affine("h")
        return cls(
            A=A,
            c=c,
            S=S_const.reshape(m, model.w),
            H=H,
            e=e,
            alpha=np.asarray(model.alpha, dtype=float),
            prior_mean=model.initial_law.x_mean,
            prior_cov=model.initial_law.x_cov,
        )

    def gain(self, P: np.ndarray) -> np.ndarray:
        return P @ self.H.T + self.S @ self.alpha.T

    def riccati(self, P: np.ndarray) -> np.ndarray:
        G = self.gain(P)
        return self.A @ P + P @ self.A.T + self.S @ self.S.T - G @ G.T


@dataclass(frozen=True)
class KalmanState:
    t: float
    mean: np.ndarray
    cov: np.ndarray


def _rhs(spec: LinearGaussianSpec, mean: np.ndarray, P: np.ndarray,
         y_rate: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    G = spec.gain(P)
    innovation = y_rate - (spec.H @ mean + spec.e)
    d_mean = spec.A @ mean + spec.c + G @ innovation
    d_cov = spec.A @ P + P @ spec.A.T + spec.S @ spec.S.T - G @ G.T
    return d_mean, d_cov


def kalman_bucy_oracle(spec: LinearGaussianSpec, dY: np.ndarray, grid: TimeGrid) -> List[KalmanState]:
    """Conditional mean and covariance at every grid time."""
    if dY.shape != (grid.n_steps, spec.H.shape[0]):
        raise ValueError(f"observation increments must have shape {(grid.n_steps, spec.H.shape[0])}")
    dt = grid.dt
    times = grid.times
    mean = np.asarray(spec.prior_mean, dtype=float).copy()
    P = symmetrize(np.asarray(spec.prior_cov, dtype=float))
    states = [KalmanState(t=float(times[0]), mean=mean.copy(), cov=P.copy())]

    for k in range(grid.n_steps):
        rate = dY[k] / dt
        k1m, k1P = _rhs(spec, mean, P, rate)
        k2m, k2P = _rhs(spec, mean + 0.5 * dt * k1m, P + 0.5 * dt * k1P, rate)
        k3m, k3P = _rhs(spec, mean + 0.5 * dt * k2m, P + 0.5 * dt * k2P, rate)
        k4m, k4P = _rhs(spec, mean + dt * k3m, P + dt * k3P, rate)
        mean = mean + dt / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
        P = symmetrize(P + dt / 6.0 * (k1P + 2.0 * k2P + 2.0 * k3P + k4P))
        states.append(KalmanState(t=float(times[k + 1]), mean=mean.copy(), cov=P.copy()))

    lowest = min_eigenvalue(P)
    if lowest < -1e-10:
        logger.warning(f"Kalman covariance lost positivity (min eigenvalue {lowest:.3e})")
    return states


def stationary_covariance(a: float, s: float, h: float, alpha: float = 0.0) -> float:
    """Positive root of the scalar Riccati equation, P_inf."""
    # 2 a P + s^2 - (P h + s alpha)^2 = 0
    qa = -h * h
    qb = 2.0 * a - 2.0 * h * s * alpha
    qc = s * s * (1.0 - alpha * alpha)
    if qa == 0.0:
        if qb == 0.0:
            raise ValueError("Riccati equation is degenerate")
        return -qc / qb
    disc = qb * qb - 4.0 * qa * qc
    roots = [(-qb + sign * np.sqrt(disc)) / (2.0 * qa) for sign in (1.0, -1.0)]
    return float(max(roots))
