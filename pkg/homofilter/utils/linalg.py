"""Small dense linear algebra helpers."""

import numpy as np

from homofilter.config import settings


class NotPositiveSemidefinite(ValueError):
    """Matrix has an eigenvalue below the clamp tolerance."""

    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"matrix is not PSD (min eigenvalue {min_eigenvalue:.3e})")


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def psd_sqrt(a: np.ndarray, tol: float = None) -> np.ndarray:
    """Symmetric square root via eigh.

    Works on a single matrix or a stack (..., k, k). Eigenvalues in [-tol, 0)
    are clamped to 0; anything below -tol raises NotPositiveSemidefinite.
    """
    if tol is None:
        tol = settings.SQRT_CLAMP_TOLERANCE
    a = symmetrize(np.asarray(a, dtype=float))
    vals, vecs = np.linalg.eigh(a)
    lowest = float(vals.min()) if vals.size else 0.0
    if lowest < -tol:
        raise NotPositiveSemidefinite(lowest)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def min_eigenvalue(a: np.ndarray) -> float:
    """Smallest eigenvalue over a matrix or a stack of symmetric matrices."""
    a = symmetrize(np.asarray(a, dtype=float))
    return float(np.linalg.eigvalsh(a).min())
