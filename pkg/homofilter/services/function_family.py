"""Bounded smooth test functions and the fixed weak-metric family.

Member k of the metric family lives on dyadic level j = floor(log2 k) with
length-scale L / 2^j and center -L + (2i + 1) L / 2^j, i = k - 2^j, so the
centers are rational multiples of L filling [-L, L]. Odd members are
tanh(u1) * exp(-|u|^2 / 2), even members the bump alone, u = (x - c) / l.
Every member is bounded by 1, so truncating the metric sum at K leaves a
tail below 2^-K.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence

import numpy as np


class FunctionKind(str, Enum):
    CONSTANT = "constant"
    BUMP = "bump"
    TANH = "tanh"
    GAUSSIAN = "gaussian"
    METRIC = "metric"


@dataclass(frozen=True)
class TestFunction:
    """phi: R^m -> R with analytic gradient and a declared sup bound."""

    __test__ = False  # not a pytest class

    kind: FunctionKind
    family_id: int
    bound: float
    center: float = 0.0
    scale: float = 1.0
    value_const: float = 0.0
    odd: bool = False

    @property
    def label(self) -> str:
        return f"{self.kind.value}_{self.family_id}"

    def _u(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.center) / self.scale

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(x)

    def value(self, x: np.ndarray) -> np.ndarray:
        """Values on a batch x of shape (N, m)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == FunctionKind.CONSTANT:
            return np.full(x.shape[0], self.value_const)
        if self.kind == FunctionKind.GAUSSIAN:
            return np.exp(-np.sum(x * x, axis=1))
        u = self._u(x)
        if self.kind == FunctionKind.TANH:
            return np.tanh(u[:, 0])
        bump = np.exp(-0.5 * np.sum(u * u, axis=1))
        if self.odd:
            return np.tanh(u[:, 0]) * bump
        return bump

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient on a batch, shape (N, m)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == FunctionKind.CONSTANT:
            return np.zeros_like(x)
        if self.kind == FunctionKind.GAUSSIAN:
            return -2.0 * x * np.exp(-np.sum(x * x, axis=1))[:, None]
        u = self._u(x)
        grad = np.zeros_like(x)
        if self.kind == FunctionKind.TANH:
            grad[:, 0] = (1.0 - np.tanh(u[:, 0]) ** 2) / self.scale
            return grad
        bump = np.exp(-0.5 * np.sum(u * u, axis=1))
        bump_grad = -u / self.scale * bump[:, None]
        if not self.odd:
            return bump_grad
        t = np.tanh(u[:, 0])
        grad = t[:, None] * bump_grad
        grad[:, 0] += (1.0 - t * t) / self.scale * bump
        return grad


def metric_member(k: int, scale: float = 2.0) -> TestFunction:
    """Member k >= 1 of the weak-metric family."""
    if k < 1:
        raise ValueError("family index starts at 1")
    level = int(math.floor(math.log2(k)))
    index = k - 2 ** level
    width = scale / 2 ** level
    center = -scale + (2 * index + 1) * width
    return TestFunction(
        kind=FunctionKind.METRIC,
        family_id=k,
        bound=1.0,
        center=center,
        scale=width,
        odd=bool(k % 2),
    )


def metric_family(count: int, scale: float = 2.0) -> List[TestFunction]:
    return [metric_member(k, scale) for k in range(1, count + 1)]


def constant_function(value: float = 1.0) -> TestFunction:
    return TestFunction(kind=FunctionKind.CONSTANT, family_id=0, bound=abs(value), value_const=value)


def bump_function(center: float = 0.0, scale: float = 1.0, family_id: int = 0) -> TestFunction:
    return TestFunction(kind=FunctionKind.BUMP, family_id=family_id, bound=1.0, center=center, scale=scale)


def tanh_function(center: float = 0.0, scale: float = 1.0, family_id: int = 0) -> TestFunction:
    return TestFunction(kind=FunctionKind.TANH, family_id=family_id, bound=1.0, center=center, scale=scale)


def gaussian_function(family_id: int = 0) -> TestFunction:
    """exp(-|x|^2)."""
    return TestFunction(kind=FunctionKind.GAUSSIAN, family_id=family_id, bound=1.0)


def evaluate_family(family: Sequence[TestFunction], x: np.ndarray) -> np.ndarray:
    """Stacked values, shape (K, N)."""
    return np.stack([phi.value(x) for phi in family])
