"""Integration against a normal density.

Rules are stored in the probabilists' convention: nodes ``x_i`` and weights
``w_i`` with ``sum_i w_i f(x_i) ~= E[f(Z)]`` for ``Z ~ N(0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import NonPositiveCurvature, NumericError

LIKELIHOOD_ORDER = 15
REFERENCE_ORDER = 61
MC_SAMPLES = 1_000_000


@dataclass(frozen=True)
class GaussHermiteRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


def _orthonormal_tail(x: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """``(p_{m-1}(x), p_m(x))`` for the orthonormal probabilists' Hermite family."""
    p0, p1 = np.zeros_like(x), np.ones_like(x)
    for k in range(m):
        p0, p1 = p1, (x * p1 - np.sqrt(k) * p0) / np.sqrt(k + 1)
    return p0, p1


@lru_cache(maxsize=None)
def gauss_hermite(order: int) -> GaussHermiteRule:
    """Gauss-Hermite rule for the standard normal, via Golub-Welsch.

    The Jacobi matrix of the monic probabilists' Hermite polynomials has a
    zero diagonal and off-diagonal ``sqrt(k)``; its eigenvalues are the nodes.
    """
    if order < 1:
        raise ValueError("order must be a positive integer")
    if order == 1:
        return GaussHermiteRule(1, np.zeros(1), np.ones(1))
    off = np.sqrt(np.arange(1, order, dtype=float))
    nodes = eigh_tridiagonal(np.zeros(order), off, eigvals_only=True)
    # The eigenvectors only carry absolute accuracy, so tail weights would be
    # lost at high order. Polish nodes by Newton and take weights from the
    # orthonormal recurrence instead: w_i = 1 / (m p_{m-1}(x_i)^2).
    for _ in range(3):
        p_prev, p_last = _orthonormal_tail(nodes, order)
        # p_m' = sqrt(m) p_{m-1}
        nodes = nodes - p_last / (np.sqrt(order) * p_prev)
    p_prev, _ = _orthonormal_tail(nodes, order)
    weights = 1.0 / (order * p_prev**2)
    # exact symmetry: average each node with its mirror
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    return GaussHermiteRule(order, nodes, weights)


def _check_finite(values: np.ndarray, nodes: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite integrand value {values[i]} at node {i} (x={nodes[i]!r})")


def expect_under_normal(
    f: Callable[[np.ndarray], np.ndarray],
    sigma2: float,
    rule: GaussHermiteRule | None = None,
) -> float:
    """E[f(U)] for U ~ N(0, sigma2) by Gauss-Hermite quadrature.

    ``f`` is called once on the array of scaled nodes.
    """
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be non-negative, got {sigma2}")
    if rule is None:
        rule = gauss_hermite(REFERENCE_ORDER)
    if sigma2 == 0:
        val = np.asarray(f(np.zeros(1)), dtype=float)
        _check_finite(val, np.zeros(1))
        return float(val[0])
    x = np.sqrt(sigma2) * rule.nodes
    vals = np.broadcast_to(np.asarray(f(x), dtype=float), x.shape)
    _check_finite(vals, x)
    return float(np.dot(rule.weights, vals))


def mc_expect_under_normal(
    f: Callable[[np.ndarray], np.ndarray],
    sigma2: float,
    n_samples: int = MC_SAMPLES,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte Carlo estimate of E[f(U)], U ~ N(0, sigma2), and its standard error."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be non-negative, got {sigma2}")
    rng = np.random.default_rng(seed)
    draws = np.sqrt(sigma2) * rng.standard_normal(n_samples)
    vals = np.broadcast_to(np.asarray(f(draws), dtype=float), draws.shape)
    _check_finite(vals, draws)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(n_samples))
    return mean, se


def adaptive_nodes(
    mode: float, curvature: float, rule: GaussHermiteRule
) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ``int g(u) du`` centred on a Laplace approximation.

    Nodes are ``mode + x_i / sqrt(curvature)``; weights divide the rule weights
    by the matched normal density, so ``sum w_i g(u_i)`` is exact whenever
    ``g`` is proportional to N(mode, 1/curvature).

    Raises
    ------
    NonPositiveCurvature
        When the log-integrand is not locally concave at ``mode``.
    """
    if not curvature > 0:
        raise NonPositiveCurvature(f"curvature must be positive, got {curvature}")
    scale = 1.0 / np.sqrt(curvature)
    nodes = mode + scale * rule.nodes
    weights = rule.weights * scale * np.sqrt(2 * np.pi) * np.exp(0.5 * rule.nodes**2)
    return nodes, weights


def adaptive_log_weights(rule: GaussHermiteRule) -> np.ndarray:
    """``log w_i + x_i^2/2 + log sqrt(2 pi)``; add ``-log sqrt(curvature)`` per integral."""
    return rule.log_weights + 0.5 * rule.nodes**2 + 0.5 * np.log(2 * np.pi)
