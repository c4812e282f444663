"""Population-level summaries of the fitted marginals.

* scatter: probability a window shows roots, averaged over tubes,
  ``E[expit(beta + U)]`` with ``U ~ N(0, sigma2)``;
* intensity: expected crossings per window, ``exp(theta + sigma2/2)``;
* the Buffon-noodle reading of intensity as visible root length per window.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import NumericError, PreconditionError
from .glmm import FittedMarginal
from .quadrature import MC_SAMPLES, REFERENCE_ORDER, expect_under_normal, gauss_hermite, mc_expect_under_normal


def scatter_probability(
    beta: float,
    sigma2: float,
    method: str = "quadrature",
    order: int = REFERENCE_ORDER,
    n_samples: int = MC_SAMPLES,
    seed: int = 0,
):
    """Marginal probability of a window with roots.

    Returns a float for ``method="quadrature"`` and ``(estimate, std_error)``
    for ``method="monte_carlo"``.
    """
    if not math.isfinite(beta):
        raise PreconditionError("beta must be finite")
    if sigma2 < 0:
        raise PreconditionError("sigma2 must be non-negative")
    f = lambda u: expit(beta + u)  # noqa: E731
    if method == "quadrature":
        return expect_under_normal(f, sigma2, gauss_hermite(order))
    if method == "monte_carlo":
        return mc_expect_under_normal(f, sigma2, n_samples, seed)
    raise PreconditionError(f"unknown method {method!r}")


def intensity(theta: float, sigma2: float) -> float:
    """Expected crossings per window: the log-normal mean ``exp(theta + sigma2/2)``."""
    if not (math.isfinite(theta) and math.isfinite(sigma2)):
        raise PreconditionError("theta and sigma2 must be finite")
    if sigma2 < 0:
        raise PreconditionError("sigma2 must be non-negative")
    try:
        return math.exp(theta + 0.5 * sigma2)
    except OverflowError:
        raise NumericError(f"intensity overflows for theta={theta}, sigma2={sigma2}")


def noodle_length(omega: float, line_spacing: float) -> float:
    """Root length per window from mean crossings with parallel lines ``line_spacing`` apart.

    Inverts ``E[crossings] = 2 L / (pi * spacing)`` for an isotropic curve.
    """
    if not omega > 0 or not line_spacing > 0:
        raise PreconditionError("omega and line_spacing must be positive")
    return 0.5 * math.pi * line_spacing * omega


def _gradient_scatter(beta, sigma2):
    """(d alpha / d beta, d alpha / d log sigma2); uses d/ds2 E f = E f''/2."""
    rule = gauss_hermite(REFERENCE_ORDER)
    u = math.sqrt(sigma2) * rule.nodes
    p = expit(beta + u)
    d_beta = float(rule.weights @ (p * (1 - p)))
    d_s2 = 0.5 * float(rule.weights @ (p * (1 - p) * (1 - 2 * p)))
    return d_beta, d_s2 * sigma2


def _delta_se(fit: FittedMarginal, cell_index: int, grad) -> float:
    idx = [cell_index, fit.covariance.shape[0] - 1]
    cov = fit.covariance[np.ix_(idx, idx)]
    g = np.asarray(grad)
    var = float(g @ cov @ g)
    return math.sqrt(var) if var >= 0 else float("nan")


def scatter_table(fit: FittedMarginal) -> list[dict]:
    """Marginal scatter per (treatment, zone) with delta-method standard errors."""
    if fit.spec.family != "binomial_logit":
        raise PreconditionError("scatter needs a binomial_logit fit")
    rows = []
    for i, ((t, z), beta) in enumerate(fit.coefficients.items()):
        alpha = scatter_probability(beta, fit.sigma2)
        rows.append(
            {
                "treatment": t,
                "zone": z,
                "stage": fit.spec.stage,
                "alpha": alpha,
                "se": _delta_se(fit, i, _gradient_scatter(beta, fit.sigma2)),
                "method": "quadrature",
            }
        )
    return rows


def intensity_table(fit: FittedMarginal, line_spacing: float | None = None) -> list[dict]:
    """Marginal intensity per (treatment, zone), optionally as noodle length."""
    if fit.spec.family != "poisson_log":
        raise PreconditionError("intensity needs a poisson_log fit")
    rows = []
    for i, ((t, z), theta) in enumerate(fit.coefficients.items()):
        omega = intensity(theta, fit.sigma2)
        se = _delta_se(fit, i, (omega, 0.5 * omega * fit.sigma2))
        row = {"treatment": t, "zone": z, "stage": fit.spec.stage, "omega": omega, "se": se}
        if line_spacing is not None:
            row["length_per_window"] = noodle_length(omega, line_spacing)
            row["length_se"] = 0.5 * math.pi * line_spacing * se
        rows.append(row)
    return rows


__all__ = [
    "intensity",
    "intensity_table",
    "noodle_length",
    "scatter_probability",
    "scatter_table",
]
