"""Truncated weak metric between weighted particle clouds.

d(mu, nu) = sum_k 2^-k min(1, |mu(phi_k) - nu(phi_k)|) over the fixed family.
"""

import math
from typing import Sequence

import numpy as np

from homofilter.services.filter_service import ParticleCloud
from homofilter.services.function_family import TestFunction, evaluate_family


def metric_from_estimates(mu_values: Sequence[float], nu_values: Sequence[float]) -> float:
    """Metric from already computed integrals of the family members, in family order."""
    diff = np.abs(np.asarray(mu_values, dtype=float) - np.asarray(nu_values, dtype=float))
    terms = [2.0 ** -(k + 1) * min(1.0, float(d)) for k, d in enumerate(diff)]
    return math.fsum(terms)


def estimate_weak_metric(
        mu: ParticleCloud,
        nu: ParticleCloud,
        family: Sequence[TestFunction],
) -> float:
    """d_hat between two clouds; identical clouds give exactly 0."""
    mu_pi, _ = mu.estimate(evaluate_family(family, mu.x))
    nu_pi, _ = nu.estimate(evaluate_family(family, nu.x))
    return metric_from_estimates(mu_pi, nu_pi)
