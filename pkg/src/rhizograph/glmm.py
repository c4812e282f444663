"""Random-intercept GLMMs for root scatter (binomial) and intensity (Poisson).

For one development stage, tube ``(t, k)`` carries a latent intercept
``u ~ N(0, sigma2)`` shared by its three zones. Given ``u`` the zone
responses are independent with linear predictor ``coef[t, z] + u``:

* ``binomial_logit``: windows with roots ~ Bi(n_windows, expit(eta))
* ``poisson_log``:    crossings ~ Po(n_windows * exp(eta))   (log-window offset)

The marginal likelihood is a product of one-dimensional integrals, one per
tube, evaluated by adaptive Gauss-Hermite quadrature centred at each tube's
posterior mode.

Parameter vectors are laid out as ``[coef[t1, A], coef[t1, B], ..., log sigma2]``
(treatment-major, zones in ``ZONES`` order).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, gammaln, logsumexp

from .data_model import ZONES, Dataset
from .errors import NonConvergenceError, NumericError, PreconditionError
from .quadrature import LIKELIHOOD_ORDER, adaptive_log_weights, gauss_hermite

logger = logging.getLogger(__name__)

FAMILIES = ("binomial_logit", "poisson_log")

SIGMA2_FLOOR = 1e-10
SIGMA2_CEILING = 100.0
COEF_BOUND = 20.0
SEPARATION_THRESHOLD = 15.0
MAX_OUTER = 200
MAX_INNER = 100
GRAD_TOL = 1e-6
STEP_TOL = 1e-8


@dataclass(frozen=True)
class MarginalSpec:
    family: str
    stage: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")

    @property
    def response(self) -> str:
        return "windows_with_roots" if self.family == "binomial_logit" else "crossings"

    @property
    def label(self) -> str:
        """Latent label of this marginal: U<d> for scatter, V<d> for intensity."""
        return ("U" if self.family == "binomial_logit" else "V") + str(self.stage)

    @classmethod
    def from_label(cls, label: str) -> "MarginalSpec":
        family = {"U": "binomial_logit", "V": "poisson_log"}[label[0]]
        return cls(family, int(label[1:]))


class _Data:
    """Per-stage arrays and the parameter-free part of the log-likelihood."""

    def __init__(self, dataset: Dataset, spec: MarginalSpec):
        arr = dataset.stage_arrays(spec.stage)
        self.tubes = arr.tubes
        self.treatments = arr.treatments
        self.tt = arr.tube_treatment
        self.n = arr.n_windows.astype(float)
        self.binomial = spec.family == "binomial_logit"
        if self.binomial:
            r = arr.windows_with_roots.astype(float)
            if np.any(r < 0) or np.any(r > self.n):
                raise NumericError("binomial response outside [0, n_windows]")
            const = gammaln(self.n + 1) - gammaln(r + 1) - gammaln(self.n - r + 1)
        else:
            r = arr.crossings.astype(float)
            if np.any(r < 0):
                raise NumericError("Poisson response is negative")
            const = r * np.log(self.n) - gammaln(r + 1)
        self.r = r
        self.const = const.sum(axis=1)
        self.n_tubes = len(self.tubes)
        self.n_treat = len(self.treatments)

    # eta has zones on the last axis; n and r broadcast from (tubes, 1, zones)
    def loglik(self, eta, n, r):
        if self.binomial:
            return r * eta - n * np.logaddexp(0.0, eta)
        return r * eta - n * np.exp(eta)

    def d1(self, eta, n, r):
        if self.binomial:
            return r - n * expit(eta)
        return r - n * np.exp(eta)

    def d2(self, eta, n):
        if self.binomial:
            p = expit(eta)
            return -n * p * (1.0 - p)
        return -n * np.exp(eta)

    def coef_matrix(self, coefficients) -> np.ndarray:
        if isinstance(coefficients, Mapping):
            try:
                return np.array(
                    [[float(coefficients[(t, z)]) for z in ZONES] for t in self.treatments]
                )
            except KeyError as exc:
                raise PreconditionError(f"coefficients missing cell {exc.args[0]}")
        b = np.asarray(coefficients, dtype=float).reshape(self.n_treat, len(ZONES))
        return b


def _posterior_modes(data: _Data, base: np.ndarray, sigma2: float, u0=None, max_iter=MAX_INNER):
    """Maximise log p(y_tube | u) + log N(u; 0, sigma2) for every tube at once.

    Returns the modes, the curvature ``-d2/du2`` at the modes, and the number
    of Newton iterations used. The objective is strictly concave, so damped
    Newton with step halving converges from any start.
    """
    u = np.zeros(data.n_tubes) if u0 is None else np.array(u0, dtype=float)
    prec = 1.0 / sigma2
    n, r = data.n, data.r

    def objective(u):
        return data.loglik(base + u[:, None], n, r).sum(1) - 0.5 * prec * u * u

    obj = objective(u)
    for it in range(1, max_iter + 1):
        eta = base + u[:, None]
        g = data.d1(eta, n, r).sum(1) - prec * u
        h = data.d2(eta, n).sum(1) - prec
        step = -g / h
        new = u + step
        new_obj = objective(new)
        for _ in range(50):
            worse = new_obj < obj - 1e-12 * np.abs(obj)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
            new = u + step
            new_obj = objective(new)
        u, obj = new, new_obj
        if np.max(np.abs(step)) < 1e-10 * max(1.0, np.sqrt(sigma2)):
            break
    curvature = prec - data.d2(base + u[:, None], n).sum(1)
    return u, curvature, it


class _Evaluator:
    """Marginal log-likelihood, score and coefficient Hessian.

    Derivatives hold the adaptive nodes fixed; the nodes move with the
    parameters only through the quadrature error, which is negligible at the
    orders used here.
    """

    def __init__(self, data: _Data, order: int):
        self.data = data
        self.rule = gauss_hermite(order)
        self.alw = adaptive_log_weights(self.rule)
        self._u = None
        self.inner_capped = False

    def modes(self, b, sigma2):
        base = b[self.data.tt]
        u, curv, it = _posterior_modes(self.data, base, sigma2, self._u)
        if it >= MAX_INNER:
            self.inner_capped = True
        self._u = u
        return base, u, curv

    def _by_treatment(self, per_tube: np.ndarray) -> np.ndarray:
        d = self.data
        out = np.zeros((d.n_treat,) + per_tube.shape[1:])
        np.add.at(out, d.tt, per_tube)
        return out

    def __call__(self, b: np.ndarray, sigma2: float, need_grad=True, need_hess=False):
        """Return ``(loglik, score, coef_hessian_blocks)``.

        ``coef_hessian_blocks`` has shape (n_treatments, 3, 3): the coefficient
        Hessian is block diagonal across treatments.
        """
        d = self.data
        with np.errstate(over="ignore", invalid="ignore"):
            if sigma2 == 0.0:
                eta = b[d.tt]
                total = float(np.sum(d.loglik(eta, d.n, d.r).sum(1) + d.const))
                if not np.isfinite(total):
                    total = -np.inf
                if not (need_grad or need_hess):
                    return total, None, None
                g = self._by_treatment(d.d1(eta, d.n, d.r))
                H = None
                if need_hess:
                    H = np.zeros((d.n_treat, 3, 3))
                    H[:, [0, 1, 2], [0, 1, 2]] = self._by_treatment(d.d2(eta, d.n))
                return total, np.append(g.ravel(), 0.0), H

            base, mode, curv = self.modes(b, sigma2)
            x = mode[:, None] + self.rule.nodes[None, :] / np.sqrt(curv)[:, None]
            eta = base[:, None, :] + x[:, :, None]
            n3, r3 = d.n[:, None, :], d.r[:, None, :]
            log_terms = (
                d.loglik(eta, n3, r3).sum(2)
                - 0.5 * x * x / sigma2
                - 0.5 * np.log(2 * np.pi * sigma2)
                + self.alw[None, :]
                - 0.5 * np.log(curv)[:, None]
            )
            norm = logsumexp(log_terms, axis=1)
            per_tube = norm + d.const
            total = float(np.sum(per_tube))
            if not np.isfinite(total):
                return -np.inf, None, None
            if not (need_grad or need_hess):
                return total, None, None
            w = np.exp(log_terms - norm[:, None])
            G = d.d1(eta, n3, r3)
            g_eta = np.einsum("ij,ijz->iz", w, G)
            gb = self._by_treatment(g_eta)
            g_ls = float(np.sum(w * (0.5 * x * x / sigma2 - 0.5)))
            H = None
            if need_hess:
                h_tube = np.einsum("ij,ijz,ijy->izy", w, G, G) - g_eta[:, :, None] * g_eta[:, None, :]
                h_tube[:, [0, 1, 2], [0, 1, 2]] += np.einsum("ij,ijz->iz", w, d.d2(eta, n3))
                H = self._by_treatment(h_tube)
            return total, np.append(gb.ravel(), g_ls), H


def marginal_loglik(
    dataset: Dataset,
    spec: MarginalSpec,
    coefficients,
    sigma2: float,
    order: int = LIKELIHOOD_ORDER,
) -> float:
    """Marginal log-likelihood of one stage/family.

    ``coefficients`` is a mapping ``(treatment, zone) -> value`` or an array of
    shape (n_treatments, 3). ``sigma2 == 0`` gives the ordinary GLM
    log-likelihood.
    """
    if sigma2 < 0:
        raise PreconditionError(f"sigma2 must be non-negative, got {sigma2}")
    data = _Data(dataset, spec)
    return _Evaluator(data, order)(data.coef_matrix(coefficients), float(sigma2), need_grad=False)[0]


def marginal_score(
    dataset: Dataset,
    spec: MarginalSpec,
    coefficients,
    sigma2: float,
    order: int = LIKELIHOOD_ORDER,
) -> np.ndarray:
    """Gradient of :func:`marginal_loglik` w.r.t. ``[coefficients..., log sigma2]``."""
    if not sigma2 > 0:
        raise PreconditionError("the score in log sigma2 needs sigma2 > 0")
    data = _Data(dataset, spec)
    return _Evaluator(data, order)(data.coef_matrix(coefficients), float(sigma2))[1]


@dataclass
class FittedMarginal:
    spec: MarginalSpec
    coefficients: dict[tuple[int, str], float]
    sigma2: float
    latent_predictions: dict[tuple[int, int], float]
    latent_posterior_sd: dict[tuple[int, int], float]
    log_likelihood: float
    converged: bool
    covariance: np.ndarray = field(repr=False)
    method: str = "reml"
    gradient_norm: float = float("nan")
    last_step: float = float("nan")
    n_iter: int = 0
    boundary: bool = False
    separated_cells: tuple[tuple[int, str], ...] = ()
    message: str = ""

    @property
    def cells(self) -> list[tuple[int, str]]:
        return list(self.coefficients)

    def coefficient_se(self, t: int, z: str) -> float:
        i = self.cells.index((t, z))
        return float(np.sqrt(self.covariance[i, i]))

    def wald_interval(self, t: int, z: str, z_crit: float = 1.959963984540054) -> tuple[float, float]:
        est, se = self.coefficients[(t, z)], self.coefficient_se(t, z)
        return est - z_crit * se, est + z_crit * se

    def to_dict(self) -> dict:
        return {
            "family": self.spec.family,
            "stage": self.spec.stage,
            "label": self.spec.label,
            "coefficients": [
                {"treatment": t, "zone": z, "estimate": v, "se": self.coefficient_se(t, z)}
                for (t, z), v in self.coefficients.items()
            ],
            "sigma2": self.sigma2,
            "log_likelihood": self.log_likelihood,
            "method": self.method,
            "converged": self.converged,
            "boundary": self.boundary,
            "separated_cells": [list(c) for c in self.separated_cells],
            "gradient_norm": self.gradient_norm,
            "last_step": self.last_step,
            "n_iter": self.n_iter,
            "message": self.message,
            "covariance": [[_json_float(v) for v in row] for row in self.covariance],
            "latent_predictions": [
                {"treatment": t, "tube": k, "mode": v, "posterior_sd": self.latent_posterior_sd[(t, k)]}
                for (t, k), v in self.latent_predictions.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedMarginal":
        """Inverse of :meth:`to_dict`."""
        cov = np.array([[np.nan if v is None else v for v in row] for row in d["covariance"]], dtype=float)
        return cls(
            spec=MarginalSpec(d["family"], int(d["stage"])),
            coefficients={(int(c["treatment"]), c["zone"]): float(c["estimate"]) for c in d["coefficients"]},
            sigma2=float(d["sigma2"]),
            latent_predictions={(int(r["treatment"]), int(r["tube"])): float(r["mode"]) for r in d["latent_predictions"]},
            latent_posterior_sd={
                (int(r["treatment"]), int(r["tube"])): float(r["posterior_sd"]) for r in d["latent_predictions"]
            },
            log_likelihood=float(d["log_likelihood"]),
            converged=bool(d["converged"]),
            covariance=cov,
            method=d.get("method", "reml"),
            gradient_norm=_from_json(d.get("gradient_norm")),
            last_step=_from_json(d.get("last_step")),
            n_iter=int(d.get("n_iter", 0)),
            boundary=bool(d.get("boundary", False)),
            separated_cells=tuple((int(t), z) for t, z in d.get("separated_cells", ())),
            message=d.get("message", ""),
        )


def _from_json(v) -> float:
    return float("nan") if v is None else float(v)


def _json_float(v) -> float | None:
    v = float(v)
    return v if np.isfinite(v) else None


def _start(data: _Data) -> np.ndarray:
    tot_r = np.stack([np.bincount(data.tt, data.r[:, j], data.n_treat) for j in range(3)], 1)
    tot_n = np.stack([np.bincount(data.tt, data.n[:, j], data.n_treat) for j in range(3)], 1)
    if data.binomial:
        b = np.log((tot_r + 0.5) / (tot_n - tot_r + 0.5))
    else:
        b = np.log((tot_r + 0.5) / tot_n)
    return np.clip(b, -COEF_BOUND + 1, COEF_BOUND - 1)


def _projected(grad, x, lo, hi, eps=1e-9):
    """Zero gradient components that push against an active bound (grad of -loglik)."""
    g = grad.copy()
    g[(x <= lo + eps) & (g > 0)] = 0.0
    g[(x >= hi - eps) & (g < 0)] = 0.0
    return g


def _fd_hessian(fun_grad, x, free, h=1e-5):
    """Central differences of the analytic gradient, symmetrised."""
    k = len(free)
    H = np.zeros((k, k))
    for a, i in enumerate(free):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        H[:, a] = (fun_grad(xp)[1][free] - fun_grad(xm)[1][free]) / (2 * step)
    return 0.5 * (H + H.T)


def _fit_ml(ev: _Evaluator, max_outer: int):
    """Joint maximisation over (coefficients, log sigma2).

    Returns ``(coef_matrix, sigma2_or_floor, grad_norm, last_step, n_iter)``.
    """
    data = ev.data
    p = data.n_treat * len(ZONES)
    lo = np.r_[np.full(p, -COEF_BOUND), np.log(SIGMA2_FLOOR)]
    hi = np.r_[np.full(p, COEF_BOUND), np.log(SIGMA2_CEILING)]

    def nll(x):
        val, g, _ = ev(x[:p].reshape(data.n_treat, -1), float(np.exp(x[p])))
        if g is None:
            return np.inf, np.zeros_like(x)
        return -val, -g

    x0 = np.r_[_start(data).ravel(), np.log(0.5)]
    res = minimize(
        nll,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"maxiter": max_outer, "ftol": 1e-15, "gtol": 1e-9, "maxcor": 20},
    )
    x = np.clip(res.x, lo, hi)
    n_iter = int(res.nit)
    f, g = nll(x)
    last_step = np.inf
    # Newton polishing on the parameters not held by a bound
    for _ in range(30):
        pg = _projected(g, x, lo, hi)
        free = np.flatnonzero(~((x <= lo + 1e-9) | (x >= hi - 1e-9)) | (pg != 0))
        if np.linalg.norm(pg) < GRAD_TOL and last_step < STEP_TOL:
            break
        if free.size == 0:
            last_step = 0.0
            break
        H = _fd_hessian(nll, x, free)
        try:
            np.linalg.cholesky(H)
            delta = -np.linalg.solve(H, g[free])
        except np.linalg.LinAlgError:
            delta = -g[free] / max(1.0, np.max(np.abs(np.diag(H))))
        t = 1.0
        for _ in range(40):
            trial = x.copy()
            trial[free] = np.clip(x[free] + t * delta, lo[free], hi[free])
            ft, gt = nll(trial)
            if ft <= f + 1e-10 * max(1.0, abs(f)):
                break
            t *= 0.5
        last_step = float(np.max(np.abs(trial - x)))
        x, f, g = trial, ft, gt
        n_iter += 1
    grad_norm = float(np.linalg.norm(_projected(g, x, lo, hi)))
    return x[:p].reshape(data.n_treat, -1), float(np.exp(x[p])), grad_norm, last_step, n_iter


def _profile_coefficients(ev: _Evaluator, sigma2: float, b0: np.ndarray):
    """Maximise the marginal likelihood over coefficients with sigma2 held fixed.

    Block Newton (one 3x3 block per treatment) with step halving; returns
    ``(b, loglik, score_norm, hessian_blocks, n_iter)``.
    """
    b = b0.copy()
    f, g, H = ev(b, sigma2, need_hess=True)
    for it in range(1, MAX_INNER + 1):
        gb = g[:-1].reshape(b.shape)
        free = np.abs(b) < COEF_BOUND - 1e-9
        pg = np.where(free | (np.sign(gb) != np.sign(b)), gb, 0.0)
        if np.max(np.abs(pg)) < 1e-10:
            break
        try:
            delta = -np.linalg.solve(H, gb[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            delta = gb / np.maximum(1.0, np.abs(H).max(axis=(1, 2)))[:, None]
        t = 1.0
        for _ in range(30):
            trial = np.clip(b + t * delta, -COEF_BOUND, COEF_BOUND)
            ft, gt, Ht = ev(trial, sigma2, need_hess=True)
            if ft >= f - 1e-9 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            break
        step = np.max(np.abs(trial - b))
        b, f, g, H = trial, ft, gt, Ht
        if step < 1e-10:
            break
    gb = g[:-1].reshape(b.shape)
    pg = np.where((np.abs(b) < COEF_BOUND - 1e-9) | (np.sign(gb) != np.sign(b)), gb, 0.0)
    return b, f, float(np.linalg.norm(pg)), H, it


def _restricted_loglik(ev: _Evaluator, sigma2: float, state: dict) -> float:
    b, f, gnorm, H, _ = _profile_coefficients(ev, sigma2, state["b"])
    state.update(b=b, gnorm=gnorm)
    # separated cells carry no curvature; leave them out of the determinant
    logdet = 0.0
    for t in range(H.shape[0]):
        keep = np.abs(b[t]) < SEPARATION_THRESHOLD
        if keep.any():
            sign, ld = np.linalg.slogdet(-H[t][np.ix_(keep, keep)])
            logdet += ld if sign > 0 else np.inf
    return f - 0.5 * logdet


def _fit_reml(ev: _Evaluator, max_outer: int):
    """Restricted likelihood: coefficients integrated out by Laplace.

    One-dimensional bounded Brent search over ``sigma = sqrt(sigma2)`` on the
    profile ``max_b loglik(b, sigma2) - 1/2 log det(-d2 loglik / db2)``; the
    coefficients are the conditional MLE at the selected ``sigma2``.
    """
    state = {"b": _start(ev.data), "gnorm": np.inf}
    calls = [0]

    def objective(s):
        calls[0] += 1
        s2 = float(s * s)
        return -_restricted_loglik(ev, s2 if s2 >= SIGMA2_FLOOR else 0.0, state)

    hi = float(np.sqrt(SIGMA2_CEILING))
    res = minimize_scalar(
        objective, bounds=(0.0, hi), method="bounded", options={"xatol": STEP_TOL, "maxiter": max_outer}
    )
    s = float(res.x)
    if objective(0.0) <= res.fun:
        s = 0.0
    sigma2 = s * s if s * s >= SIGMA2_FLOOR else 0.0
    _restricted_loglik(ev, sigma2, state)
    last_step = STEP_TOL / 2 if res.success else np.inf
    return state["b"], sigma2, state["gnorm"], last_step, int(res.nfev)


def fit_marginal(
    dataset: Dataset,
    spec: MarginalSpec,
    order: int = LIKELIHOOD_ORDER,
    method: str = "reml",
    max_outer: int = MAX_OUTER,
) -> FittedMarginal:
    """Fit one stage/family by adaptive Gauss-Hermite marginal likelihood.

    ``method="ml"`` maximises jointly over ``(coefficients, log sigma2)``:
    L-BFGS-B followed by Newton polishing with a finite-difference Hessian of
    the analytic score. ``method="reml"`` (default) chooses ``sigma2`` from the
    restricted likelihood, which removes the downward bias ML has when each
    treatment holds only a handful of tubes, and then maximises over the
    coefficients.

    Coefficients are boxed to ``+-COEF_BOUND``; cells beyond
    ``SEPARATION_THRESHOLD`` are flagged as separated. A variance estimate
    below ``SIGMA2_FLOOR`` is reported as ``sigma2 = 0`` with ``boundary=True``.
    Non-convergence is reported through ``converged=False`` and ``message``,
    never raised.
    """
    if method not in ("ml", "reml"):
        raise ValueError(f"method must be 'ml' or 'reml', got {method!r}")
    data = _Data(dataset, spec)
    ev = _Evaluator(data, order)
    p = data.n_treat * len(ZONES)
    if method == "ml":
        b, sigma2, grad_norm, last_step, n_iter = _fit_ml(ev, max_outer)
    else:
        b, sigma2, grad_norm, last_step, n_iter = _fit_reml(ev, max_outer)
    converged = grad_norm < GRAD_TOL and last_step < STEP_TOL and not ev.inner_capped

    boundary = sigma2 <= SIGMA2_FLOOR * (1 + 1e-6)
    if boundary:
        sigma2 = 0.0

    # observed information of the marginal likelihood on identifiable parameters
    x = np.r_[b.ravel(), np.log(sigma2) if sigma2 > 0 else 0.0]

    def nll(x):
        val, g, _ = ev(x[:p].reshape(data.n_treat, -1), float(np.exp(x[p])))
        return -val, -g

    def nll_fixed(x):
        val, g, _ = ev(x[:p].reshape(data.n_treat, -1), 0.0)
        return -val, -g

    free = [i for i in range(p) if abs(x[i]) < SEPARATION_THRESHOLD]
    if not boundary:
        free.append(p)
    free = np.array(free, dtype=int)
    cov = np.full((p + 1, p + 1), np.nan)
    if free.size:
        H = _fd_hessian(nll if not boundary else nll_fixed, x, free)
        try:
            cov[np.ix_(free, free)] = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            pass
    if boundary:
        cov[p, :] = 0.0
        cov[:, p] = 0.0

    loglik = ev(b, sigma2, need_grad=False)[0]
    if sigma2 > 0:
        _, mode, curv = ev.modes(b, sigma2)
        sd = 1.0 / np.sqrt(curv)
    else:
        mode = np.zeros(data.n_tubes)
        sd = np.zeros(data.n_tubes)

    cells = [(t, z) for t in data.treatments for z in ZONES]
    separated = tuple(c for c, v in zip(cells, b.ravel()) if abs(v) > SEPARATION_THRESHOLD)
    msgs = []
    if not converged:
        msgs.append(
            f"not converged: score norm {grad_norm:.3g}, last step {last_step:.3g}"
            + (", inner iteration cap hit" if ev.inner_capped else "")
        )
    if separated:
        msgs.append(f"separation in cells {list(separated)}")
    if boundary:
        msgs.append("sigma2 on the zero boundary")
    if msgs:
        logger.info("%s stage %d: %s", spec.family, spec.stage, "; ".join(msgs))
    return FittedMarginal(
        spec=spec,
        coefficients={c: float(v) for c, v in zip(cells, b.ravel())},
        sigma2=float(sigma2),
        latent_predictions={tk: float(u) for tk, u in zip(data.tubes, mode)},
        latent_posterior_sd={tk: float(s) for tk, s in zip(data.tubes, sd)},
        log_likelihood=float(loglik),
        converged=bool(converged),
        covariance=cov,
        method=method,
        gradient_norm=grad_norm,
        last_step=float(last_step),
        n_iter=n_iter,
        boundary=bool(boundary),
        separated_cells=separated,
        message="; ".join(msgs),
    )


def predict_latent(
    fit: FittedMarginal, dataset: Dataset, allow_unconverged: bool = False
) -> dict[tuple[int, int], float]:
    """Posterior modes of the tube intercepts at the fitted parameters."""
    if not fit.converged and not allow_unconverged:
        raise NonConvergenceError(
            f"{fit.spec.label} fit did not converge ({fit.message}); pass allow_unconverged=True"
        )
    data = _Data(dataset, fit.spec)
    if fit.sigma2 == 0:
        return {tk: 0.0 for tk in data.tubes}
    b = data.coef_matrix(fit.coefficients)
    u, _, _ = _posterior_modes(data, b[data.tt], fit.sigma2)
    return {tk: float(v) for tk, v in zip(data.tubes, u)}
