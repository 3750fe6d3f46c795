"""Coefficient fields built from model-file entries.

A field maps a batch of points ``x (N, m)``, ``z (N, n)`` to values of shape
``(N, *shape)``. Fields come from DSL strings, plain numbers or builtin
parametric families.
"""

import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from homofilter.exceptions import ModelValidationError
from homofilter.models.model_file import BuiltinCoefficient, BuiltinFamily
from homofilter.services.expression_parser import (
    CoefficientExpr,
    constant_expression,
    parse_expression,
)

logger = logging.getLogger(__name__)


class CoefficientField:
    """Base class; subclasses implement evaluate."""

    name: str = ""
    shape: Tuple[int, ...] = ()
    depends_on_z: bool = True
    bounded: bool = True

    def evaluate(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.evaluate(x, z)

    def linear_parts(self, m: int, n: int) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(A, B, c) with value = A x + B z + c, flattened over the output; None if not affine."""
        return None

    def describe(self) -> str:
        return type(self).__name__


class ExpressionField(CoefficientField):
    """A vector or matrix of DSL expressions."""

    def __init__(self, name: str, exprs: np.ndarray):
        self.name = name
        self.exprs = exprs
        self.shape = exprs.shape
        self.depends_on_z = any(e.depends_on_z for e in exprs.flat)
        self.bounded = True

    def evaluate(self, x, z):
        count = x.shape[0]
        flat = [e.evaluate(x, z) for e in self.exprs.flat]
        return np.stack(flat, axis=-1).reshape((count,) + self.shape)

    def describe(self) -> str:
        return "[" + ", ".join(e.to_text() for e in self.exprs.flat) + "]"


class ConstantField(CoefficientField):
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=float)
        self.shape = self.value.shape
        self.depends_on_z = False
        self.bounded = True

    def evaluate(self, x, z):
        return np.broadcast_to(self.value, (x.shape[0],) + self.shape).copy()

    def linear_parts(self, m, n):
        k = self.value.size
        return np.zeros((k, m)), np.zeros((k, n)), self.value.reshape(-1).copy()

    def describe(self) -> str:
        return f"constant {self.value.tolist()}"


class LinearField(CoefficientField):
    """A x + B z + c (unbounded)."""

    def __init__(self, name: str, A: np.ndarray, B: np.ndarray, c: np.ndarray, shape):
        self.name = name
        self.A, self.B, self.c = A, B, c
        self.shape = shape
        self.depends_on_z = bool(np.any(B != 0.0))
        self.bounded = not (np.any(A != 0.0) or np.any(B != 0.0))

    def evaluate(self, x, z):
        out = x @ self.A.T + z @ self.B.T + self.c
        return out.reshape((x.shape[0],) + self.shape)

    def linear_parts(self, m, n):
        return self.A.copy(), self.B.copy(), self.c.copy()

    def describe(self) -> str:
        return f"linear A={self.A.tolist()} B={self.B.tolist()} c={self.c.tolist()}"


class OUField(CoefficientField):
    """-theta (z - C x - c), the mean-reverting fast drift."""

    def __init__(self, name: str, theta: np.ndarray, C: np.ndarray, c: np.ndarray):
        self.name = name
        self.theta, self.C, self.c = theta, C, c
        self.shape = (theta.shape[0],)
        self.depends_on_z = True
        self.bounded = False

    def evaluate(self, x, z):
        return -(z - x @ self.C.T - self.c) @ self.theta.T

    def linear_parts(self, m, n):
        return self.theta @ self.C, -self.theta.copy(), self.theta @ self.c

    def describe(self) -> str:
        return f"ou theta={self.theta.tolist()} C={self.C.tolist()} c={self.c.tolist()}"


class TanhBoundedField(CoefficientField):
    """s * tanh(A x + B z + c), bounded by |s|."""

    def __init__(self, name: str, scale: np.ndarray, A, B, c, shape):
        self.name = name
        self.scale, self.A, self.B, self.c = scale, A, B, c
        self.shape = shape
        self.depends_on_z = bool(np.any(B != 0.0))
        self.bounded = True

    def evaluate(self, x, z):
        out = self.scale * np.tanh(x @ self.A.T + z @ self.B.T + self.c)
        return out.reshape((x.shape[0],) + self.shape)

    def describe(self) -> str:
        return f"tanh_bounded s={self.scale.tolist()}"


class ScaledField(CoefficientField):
    """Left-multiplies a vector field by a fixed matrix (used by the kappa normalization)."""

    def __init__(self, inner: CoefficientField, matrix: np.ndarray):
        self.inner = inner
        self.matrix = np.asarray(matrix, dtype=float)
        self.name = inner.name
        self.shape = (self.matrix.shape[0],)
        self.depends_on_z = inner.depends_on_z
        self.bounded = inner.bounded

    def evaluate(self, x, z):
        return self.inner.evaluate(x, z) @ self.matrix.T

    def linear_parts(self, m, n):
        parts = self.inner.linear_parts(m, n)
        if parts is None:
            return None
        A, B, c = parts
        return self.matrix @ A, self.matrix @ B, self.matrix @ c

    def describe(self) -> str:
        return f"{self.matrix.tolist()} @ {self.inner.describe()}"


def _matrix(params: Dict[str, Any], key: str, rows: int, cols: int, default=0.0) -> np.ndarray:
    value = params.get(key, default)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if rows == cols:
            return float(arr) * np.eye(rows)
        return np.full((rows, cols), float(arr))
    if arr.ndim == 1 and cols == 1:
        arr = arr.reshape(rows, 1) if arr.size == rows else arr
    if arr.shape != (rows, cols):
        raise ModelValidationError(
            f"parameter {key!r} must have shape ({rows}, {cols}), got {arr.shape}"
        )
    return arr


def _vector(params: Dict[str, Any], key: str, size: int, default=0.0) -> np.ndarray:
    arr = np.asarray(params.get(key, default), dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    if arr.shape != (size,):
        raise ModelValidationError(f"parameter {key!r} must have length {size}, got {arr.shape}")
    return arr


def _builtin_field(
        name: str,
        spec: BuiltinCoefficient,
        shape: Tuple[int, ...],
        dims: Tuple[int, int],
        unsafe_unbounded: bool,
) -> CoefficientField:
    m, n = dims
    params = spec.params
    size = int(np.prod(shape))
    family = spec.builtin

    if family == BuiltinFamily.CONSTANT:
        value = np.asarray(params.get("value", 0.0), dtype=float)
        if value.ndim == 0:
            value = np.full(shape, float(value))
        if value.size != size:
            raise ModelValidationError(f"{name}: constant value must have {size} entries")
        return ConstantField(name, value.reshape(shape))

    if family == BuiltinFamily.LINEAR:
        field = LinearField(
            name,
            _matrix(params, "A", size, m),
            _matrix(params, "B", size, n),
            _vector(params, "c", size),
            shape,
        )
        if not field.bounded and not unsafe_unbounded:
            raise ModelValidationError(
                f"{name}: the linear family is unbounded",
                suggestion="set unsafe_unbounded: true (linear-Gaussian oracle studies only)",
            )
        return field

    if family == BuiltinFamily.OU:
        if name != "f":
            raise ModelValidationError(f"{name}: the ou family is only valid for the fast drift f")
        return OUField(
            name,
            _matrix(params, "theta", n, n, default=1.0),
            _matrix(params, "C", n, m),
            _vector(params, "c", n),
        )

    if family == BuiltinFamily.TANH_BOUNDED:
        return TanhBoundedField(
            name,
            _vector(params, "scale", size, default=1.0),
            _matrix(params, "A", size, m),
            _matrix(params, "B", size, n),
            _vector(params, "c", size),
            shape,
        )

    raise ModelValidationError(f"{name}: unknown builtin family {family}")


def build_field(
        name: str,
        spec,
        shape: Tuple[int, ...],
        dims: Tuple[int, int],
        unsafe_unbounded: bool = False,
) -> CoefficientField:
    """Turn a model-file coefficient entry into a field of the given output shape."""
    if isinstance(spec, BuiltinCoefficient):
        return _builtin_field(name, spec, shape, dims, unsafe_unbounded)

    entries = np.asarray(spec, dtype=object)
    size = int(np.prod(shape))
    if entries.size != size:
        raise ModelValidationError(
            f"{name}: expected {size} entries for shape {shape}, got {entries.size}"
        )
    entries = entries.reshape(shape)

    if all(not isinstance(e, str) for e in entries.flat):
        return ConstantField(name, entries.astype(float))

    exprs = np.empty(shape, dtype=object)
    for index, entry in np.ndenumerate(entries):
        exprs[index] = _entry_expression(entry, dims)
    return ExpressionField(name, exprs)


def _entry_expression(entry, dims: Tuple[int, int]) -> CoefficientExpr:
    if isinstance(entry, str):
        return parse_expression(entry, dims)
    return constant_expression(float(entry), dims)


def build_vector_exprs(entries: Sequence, dims: Tuple[int, int]) -> np.ndarray:
    """Array of expressions from a (nested) list of strings or numbers."""
    arr = np.asarray(entries, dtype=object)
    exprs = np.empty(arr.shape, dtype=object)
    for index, entry in np.ndenumerate(arr):
        exprs[index] = _entry_expression(entry, dims)
    return exprs
