"""Multiscale model construction, kappa normalization and assumption checks."""

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import linalg as sla

from homofilter.config import settings
from homofilter.exceptions import ModelValidationError
from homofilter.models.experiment import AssumptionCheckConfig
from homofilter.models.model_file import (
    CoordinateLaw,
    Dimensions,
    GaussianLaw,
    ModelFile,
    read_model_file,
)
from homofilter.models.reports import AssumptionReport
from homofilter.services.coefficient_builder import CoefficientField, ScaledField, build_field
from homofilter.utils.linalg import psd_sqrt

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitialLaw:
    """Product of per-coordinate point masses and Gaussians for (X0, Z0)."""

    x_laws: Tuple[CoordinateLaw, ...]
    z_laws: Tuple[CoordinateLaw, ...]

    @staticmethod
    def _moments(laws) -> Tuple[np.ndarray, np.ndarray]:
        mean = np.array([law.mean if isinstance(law, GaussianLaw) else law.value for law in laws])
        std = np.array([law.std if isinstance(law, GaussianLaw) else 0.0 for law in laws])
        return mean, std

    @property
    def x_mean(self) -> np.ndarray:
        return self._moments(self.x_laws)[0]

    @property
    def x_cov(self) -> np.ndarray:
        return np.diag(self._moments(self.x_laws)[1] ** 2)

    @property
    def z_mean(self) -> np.ndarray:
        return self._moments(self.z_laws)[0]

    @property
    def z_std(self) -> np.ndarray:
        return self._moments(self.z_laws)[1]

    @property
    def x_std(self) -> np.ndarray:
        return self._moments(self.x_laws)[1]

    def sample(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Draw (x, z) with shapes (count, m), (count, n); always consumes the same normals."""
        x_mean, x_std = self._moments(self.x_laws)
        z_mean, z_std = self._moments(self.z_laws)
        x = x_mean + x_std * rng.standard_normal((count, len(self.x_laws)))
        z = z_mean + z_std * rng.standard_normal((count, len(self.z_laws)))
        return x, z


@dataclass(frozen=True)
class MultiscaleModel:
    """Coefficients (b, sigma, f, g, h, alpha, gamma), dimensions, epsilon and initial law."""

    dims: Dimensions
    epsilon: float
    b: CoefficientField
    sigma: CoefficientField
    f: CoefficientField
    g: CoefficientField
    h: CoefficientField
    alpha: np.ndarray
    gamma: np.ndarray
    initial_law: InitialLaw
    unsafe_unbounded: bool = False
    source: Optional[str] = None
    fingerprint: Optional[str] = None  # sha256 of the document without epsilon

    @property
    def m(self) -> int:
        return self.dims.m

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def d(self) -> int:
        return self.dims.d

    @property
    def w(self) -> int:
        return self.dims.w

    @property
    def K(self) -> np.ndarray:
        return self.alpha @ self.alpha.T + self.gamma @ self.gamma.T

    @property
    def slow_fields(self) -> List[CoefficientField]:
        return [self.b, self.sigma, self.h]

    @property
    def z_free(self) -> bool:
        """True when b, sigma and h do not depend on z."""
        return not any(fld.depends_on_z for fld in self.slow_fields)

    @cached_property
    def gamma_perp(self) -> np.ndarray:
        """(I_w - alpha* alpha)^(1/2), driving the part of W independent of the observation."""
        try:
            return psd_sqrt(np.eye(self.w) - self.alpha.T @ self.alpha)
        except ValueError as e:
            raise ModelValidationError(
                f"I - alpha* alpha is not positive semidefinite: {e}",
                suggestion="normalize the model first",
            )

    def with_epsilon(self, epsilon: float) -> "MultiscaleModel":
        if not 0.0 < epsilon < 1.0:
            raise ModelValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
        return dataclasses.replace(self, epsilon=float(epsilon))


@dataclass(frozen=True)
class NormalizedModel(MultiscaleModel):
    """Model with h, alpha, gamma scaled by kappa^-1 so that alpha alpha* + gamma gamma* = I."""

    kappa: np.ndarray = field(default_factory=lambda: np.eye(1))


def document_fingerprint(doc: ModelFile) -> str:
    """Digest of everything in a model document except epsilon."""
    text = doc.model_dump_json(exclude={"epsilon"})
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_model(doc: ModelFile, source: Optional[str] = None) -> MultiscaleModel:
    """Build a MultiscaleModel from a validated model document."""
    dims = doc.dims
    xz = (dims.m, dims.n)
    unsafe = doc.unsafe_unbounded

    alpha = np.asarray(doc.alpha, dtype=float)
    gamma = np.asarray(doc.gamma, dtype=float)
    if alpha.shape != (dims.d, dims.w):
        raise ModelValidationError(f"alpha must be {dims.d} x {dims.w}, got {alpha.shape}")
    if gamma.shape != (dims.d, dims.u):
        raise ModelValidationError(f"gamma must be {dims.d} x {dims.u}, got {gamma.shape}")
    if len(doc.initial_law.x) != dims.m or len(doc.initial_law.z) != dims.n:
        raise ModelValidationError("initial_law needs one entry per coordinate of x and z")

    model = MultiscaleModel(
        dims=dims,
        epsilon=doc.epsilon,
        b=build_field("b", doc.b, (dims.m,), xz, unsafe),
        sigma=build_field("sigma", doc.sigma, (dims.m, dims.w), xz, unsafe),
        f=build_field("f", doc.f, (dims.n,), xz, True),
        g=build_field("g", doc.g, (dims.n, dims.v), xz, unsafe),
        h=build_field("h", doc.h, (dims.d,), xz, unsafe),
        alpha=alpha,
        gamma=gamma,
        initial_law=InitialLaw(tuple(doc.initial_law.x), tuple(doc.initial_law.z)),
        unsafe_unbounded=unsafe,
        source=source,
        fingerprint=document_fingerprint(doc),
    )
    logger.info(
        f"Built model m={dims.m} n={dims.n} d={dims.d} epsilon={doc.epsilon} "
        f"z_free={model.z_free}"
    )
    return model


def load_model_file(path: Union[str, Path]) -> MultiscaleModel:
    """Read, validate and build a model from a JSON file."""
    return build_model(read_model_file(path), source=str(path))


def normalize_correlation(model: MultiscaleModel) -> NormalizedModel:
    """Rescale h, alpha, gamma by kappa^-1 where kappa kappa* = alpha alpha* + gamma gamma*."""
    K = model.K
    try:
        kappa = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise ModelValidationError(
            "K = alpha alpha* + gamma gamma* is not positive definite",
            suggestion="check the alpha and gamma matrices",
        )
    try:
        np.linalg.cholesky(model.gamma @ model.gamma.T)
    except np.linalg.LinAlgError:
        raise ModelValidationError(
            "gamma gamma* is singular; the observation needs independent noise",
            suggestion="gamma must have full row rank",
        )

    kappa_inv = sla.solve_triangular(kappa, np.eye(model.d), lower=True)
    alpha = kappa_inv @ model.alpha
    gamma = kappa_inv @ model.gamma
    identity_gap = np.max(np.abs(alpha @ alpha.T + gamma @ gamma.T - np.eye(model.d)))
    if identity_gap > settings.NORMALIZATION_TOLERANCE:
        raise ModelValidationError(
            f"normalized noise covariance deviates from identity by {identity_gap:.3e}"
        )

    values = {f.name: getattr(model, f.name) for f in dataclasses.fields(MultiscaleModel)}
    values.update(
        h=ScaledField(model.h, kappa_inv),
        alpha=alpha,
        gamma=gamma,
    )
    normalized = NormalizedModel(**values, kappa=kappa)
    logger.debug(f"Normalized correlation with kappa={kappa.tolist()}")
    return normalized


def check_assumptions(
        model: MultiscaleModel,
        box: Optional[AssumptionCheckConfig] = None,
        rng: Optional[np.random.Generator] = None,
) -> AssumptionReport:
    """Sample the box and report recurrence, ellipticity and sup-norm diagnostics."""
    box = box or AssumptionCheckConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    count = box.samples

    x = rng.uniform(box.x_lower, box.x_upper, size=(count, model.m))
    z = rng.uniform(box.z_lower, box.z_upper, size=(count, model.n))
    flags = []

    fz = model.f(x, z)
    znorm = np.linalg.norm(z, axis=1)
    outside = znorm > box.radius
    margin = None
    if np.any(outside):
        inner = np.einsum("ij,ij->i", fz[outside], z[outside])
        margin = float(np.min(-inner / znorm[outside] ** box.exponent))
        if margin <= 0.0:
            flags.append(f"recurrence: -<f,z>/|z|^{box.exponent:g} reaches {margin:.3g} <= 0")
    else:
        flags.append(f"recurrence: no sampled point with |z| > {box.radius:g}")

    gz = model.g(x, z)
    gg = gz @ np.swapaxes(gz, -1, -2)
    eig = np.linalg.eigvalsh(gg)
    ell_min, ell_max = float(eig.min()), float(eig.max())
    if ell_min <= 1e-12:
        flags.append(f"ellipticity: smallest eigenvalue of g g* is {ell_min:.3g}")

    sup_norms = {}
    for fld in (model.b, model.sigma, model.h, model.f, model.g):
        values = fld(x, z)
        sup_norms[fld.name] = float(np.max(np.abs(values))) if values.size else 0.0
        if not np.all(np.isfinite(values)):
            flags.append(f"boundedness: {fld.name} is not finite on the box")

    unbounded = [fld.name for fld in model.slow_fields if not fld.bounded]
    if unbounded:
        flags.append(f"boundedness: unbounded families in {', '.join(unbounded)}")

    kappa = getattr(model, "kappa", None)
    K = kappa @ kappa.T if kappa is not None else model.K
    report = AssumptionReport(
        samples=count,
        recurrence_exponent=box.exponent,
        recurrence_radius=box.radius,
        recurrence_margin=margin,
        ellipticity_min=ell_min,
        ellipticity_max=ell_max,
        sup_norms=sup_norms,
        k_eigenvalues=[float(v) for v in np.linalg.eigvalsh(K)],
        unbounded_families=unbounded,
        flags=flags,
    )
    for flag in flags:
        logger.warning(f"Assumption check: {flag}")
    return report
