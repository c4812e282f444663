"""Gaussian graphical models on predicted latent components.

Covariance selection: the precision matrix is constrained to zero off the
edge set and fitted by iterative proportional scaling (IPS) over the maximal
cliques. Model choice is by BIC, either over every graph on the vertex set or
by a backward/forward stepwise walk. Edge-level inference uses the Fisher
z-transform of partial correlations from the saturated model.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numba
import numpy as np
from scipy.stats import norm

from .errors import DegeneracyError, NonConvergenceError, PreconditionError
from .latent_graph import LABELS, LatentGraph

IPS_TOL = 1e-8
IPS_MAX_SWEEPS = 10_000
MIN_TUBES = 8


@dataclass(frozen=True)
class LatentMatrix:
    """Predicted latent components, one row per tube, one column per label."""

    values: np.ndarray
    labels: tuple[str, ...] = LABELS
    tubes: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.labels):
            raise PreconditionError(f"values must have shape (n, {len(self.labels)})")
        if not np.all(np.isfinite(v)):
            raise PreconditionError("latent matrix has missing or non-finite cells")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_predictions(
        cls, predictions: Mapping[str, Mapping[tuple[int, int], float]], labels: Iterable[str] = LABELS
    ) -> "LatentMatrix":
        """Assemble from ``label -> {(treatment, tube): prediction}`` maps."""
        labels = tuple(labels)
        tubes = tuple(sorted(predictions[labels[0]]))
        for lab in labels:
            if set(predictions[lab]) != set(tubes):
                raise PreconditionError(f"predictions for {lab} cover different tubes")
        vals = np.array([[predictions[lab][tk] for lab in labels] for tk in tubes])
        return cls(vals, labels, tubes)

    def subset(self, labels: Iterable[str]) -> "LatentMatrix":
        labels = tuple(labels)
        idx = [self.labels.index(lab) for lab in labels]
        return LatentMatrix(self.values[:, idx], labels, self.tubes)

    def _require_inferential(self):
        p = len(self.labels)
        if self.n - (p - 2) - 3 <= 0 or self.n < MIN_TUBES:
            raise PreconditionError(f"need more tubes for inference (n={self.n}, p={p})")


def sample_covariance(latent: LatentMatrix | np.ndarray) -> np.ndarray:
    """ML covariance (divisor n) of the column-centred data.

    Raises
    ------
    DegeneracyError
        If the result is singular, e.g. two identical or constant columns.
    """
    x = latent.values if isinstance(latent, LatentMatrix) else np.asarray(latent, dtype=float)
    n, p = x.shape
    if n < p + 1:
        raise DegeneracyError(f"n={n} tubes cannot give a non-singular {p}x{p} covariance")
    xc = x - x.mean(axis=0)
    S = xc.T @ xc / n
    S = 0.5 * (S + S.T)
    d = np.sqrt(np.diag(S))
    if np.any(d == 0):
        raise DegeneracyError("constant column in latent matrix")
    w = np.linalg.eigvalsh(S / np.outer(d, d))
    if w.min() <= 1e-12:
        raise DegeneracyError(f"sample covariance is singular (min correlation eigenvalue {w.min():.3g})")
    return S


# ----------------------------------------------------------------------------
# IPS kernel


@numba.njit(cache=True, nogil=True)
def _maximal_cliques(adj):
    """Maximal cliques as vertex bitmasks, in a perfect order for chordal graphs."""
    p = adj.shape[0]
    # maximum cardinality search; ties to the lowest index
    rank = np.empty(p, np.int64)
    visited = np.zeros(p, np.bool_)
    weight = np.zeros(p, np.int64)
    for r in range(p):
        best = -1
        for v in range(p):
            if not visited[v] and (best < 0 or weight[v] > weight[best]):
                best = v
        visited[best] = True
        rank[best] = r
        for w in range(p):
            if adj[best, w] and not visited[w]:
                weight[w] += 1

    nsub = 1 << p
    is_clique = np.zeros(nsub, np.bool_)
    is_clique[0] = True
    for m in range(1, nsub):
        # lowest set bit
        v = 0
        while not (m >> v) & 1:
            v += 1
        rest = m & ~(1 << v)
        ok = is_clique[rest]
        if ok:
            for w in range(p):
                if (rest >> w) & 1 and not adj[v, w]:
                    ok = False
                    break
        is_clique[m] = ok

    out = np.empty(nsub, np.int64)
    keys = np.empty(nsub, np.int64)
    k = 0
    for m in range(1, nsub):
        if not is_clique[m]:
            continue
        maximal = True
        for w in range(p):
            if not (m >> w) & 1 and is_clique[m | (1 << w)]:
                maximal = False
                break
        if maximal:
            key = 0
            for w in range(p):
                if (m >> w) & 1 and rank[w] > key:
                    key = rank[w]
            out[k] = m
            keys[k] = key
            k += 1
    order = np.argsort(keys[:k], kind="mergesort")
    return out[:k][order]


@numba.njit(cache=True, nogil=True)
def _members(mask, p):
    idx = np.empty(p, np.int64)
    c = 0
    for v in range(p):
        if (mask >> v) & 1:
            idx[c] = v
            c += 1
    return idx[:c]


@numba.njit(cache=True, nogil=True)
def _ips(S, adj, inv_table, tol, max_sweeps):
    """Constrained MLE of the precision matrix; returns (K, sweeps, converged)."""
    p = S.shape[0]
    cliques = _maximal_cliques(adj)
    K = np.zeros((p, p))
    for i in range(p):
        K[i, i] = 1.0 / S[i, i]
    Sig = np.zeros((p, p))
    for i in range(p):
        Sig[i, i] = S[i, i]
    for sweep in range(1, max_sweeps + 1):
        K_old = K.copy()
        for ci in range(cliques.shape[0]):
            mask = cliques[ci]
            idx = _members(mask, p)
            c = idx.shape[0]
            Scc_inv = inv_table[mask][:c, :c]
            Sig_cc = np.empty((c, c))
            S_cc = np.empty((c, c))
            for a in range(c):
                for b in range(c):
                    Sig_cc[a, b] = Sig[idx[a], idx[b]]
                    S_cc[a, b] = S[idx[a], idx[b]]
            Sig_cc_inv = np.linalg.inv(Sig_cc)
            for a in range(c):
                for b in range(c):
                    K[idx[a], idx[b]] += Scc_inv[a, b] - Sig_cc_inv[a, b]
            # Sigma <- Sigma + A^T (S_cc - Sigma_cc) A,  A = Sigma_cc^{-1} Sigma_{C,.}
            A = np.zeros((c, p))
            for a in range(c):
                for j in range(p):
                    acc = 0.0
                    for b in range(c):
                        acc += Sig_cc_inv[a, b] * Sig[idx[b], j]
                    A[a, j] = acc
            D = S_cc - Sig_cc
            DA = D @ A
            Sig += A.T @ DA
        for i in range(p):
            for j in range(i + 1, p):
                m = 0.5 * (K[i, j] + K[j, i])
                K[i, j] = m
                K[j, i] = m
        Sig = np.linalg.inv(K)
        delta = 0.0
        for i in range(p):
            for j in range(p):
                d = abs(K[i, j] - K_old[i, j]) / math.sqrt(abs(K[i, i] * K[j, j]))
                if d > delta:
                    delta = d
        if delta < tol:
            return K, sweep, True
    return K, max_sweeps, False


@numba.njit(cache=True, nogil=True)
def _graph_scores(S, pairs_i, pairs_j, masks, inv_table, n, tol, max_sweeps):
    p = S.shape[0]
    out_ll = np.empty(masks.shape[0])
    out_ok = np.zeros(masks.shape[0], np.bool_)
    const = -0.5 * p * n * math.log(2 * math.pi)
    for g in range(masks.shape[0]):
        adj = np.zeros((p, p), np.bool_)
        m = masks[g]
        for b in range(pairs_i.shape[0]):
            if (m >> b) & 1:
                adj[pairs_i[b], pairs_j[b]] = True
                adj[pairs_j[b], pairs_i[b]] = True
        K, _, ok = _ips(S, adj, inv_table, tol, max_sweeps)
        # log det via Cholesky; failure marks the graph infeasible
        ld = 0.0
        L = np.zeros((p, p))
        feasible = ok
        for i in range(p):
            for j in range(i + 1):
                acc = K[i, j]
                for k in range(j):
                    acc -= L[i, k] * L[j, k]
                if i == j:
                    if acc <= 0.0:
                        feasible = False
                        acc = 1.0
                    L[i, i] = math.sqrt(acc)
                    ld += 2.0 * math.log(L[i, i])
                else:
                    L[i, j] = acc / L[j, j]
        tr = 0.0
        for i in range(p):
            for j in range(p):
                tr += S[i, j] * K[j, i]
        out_ll[g] = 0.5 * n * (ld - tr) + const
        out_ok[g] = feasible
    return out_ll, out_ok


def _inverse_table(S: np.ndarray) -> np.ndarray:
    p = S.shape[0]
    table = np.zeros((1 << p, p, p))
    for m in range(1, 1 << p):
        idx = [v for v in range(p) if (m >> v) & 1]
        table[m, : len(idx), : len(idx)] = np.linalg.inv(S[np.ix_(idx, idx)])
    return table


def _pairs(p: int) -> tuple[np.ndarray, np.ndarray]:
    ij = list(itertools.combinations(range(p), 2))
    return np.array([i for i, _ in ij], np.int64), np.array([j for _, j in ij], np.int64)


def graph_to_mask(graph: LatentGraph) -> int:
    idx = {v: i for i, v in enumerate(graph.vertices)}
    pos = {pair: b for b, pair in enumerate(itertools.combinations(range(len(graph.vertices)), 2))}
    m = 0
    for a, b in graph.edges:
        i, j = sorted((idx[a], idx[b]))
        m |= 1 << pos[(i, j)]
    return m


def mask_to_graph(mask: int, labels: tuple[str, ...]) -> LatentGraph:
    edges = [
        (labels[i], labels[j])
        for b, (i, j) in enumerate(itertools.combinations(range(len(labels)), 2))
        if (mask >> b) & 1
    ]
    return LatentGraph.from_edges(edges, labels)


# ----------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class PrecisionModel:
    graph: LatentGraph
    precision: np.ndarray
    covariance: np.ndarray
    partial_correlations: dict[tuple[str, str], float]
    loglik: float
    bic: float
    n_params: int
    n: int
    sweeps: int = 0

    def to_dict(self) -> dict:
        return {
            "vertices": list(self.graph.vertices),
            "edges": [list(e) for e in self.graph.sorted_edges()],
            "partial_correlations": [
                {"edge": list(e), "value": v} for e, v in self.partial_correlations.items()
            ],
            "loglik": self.loglik,
            "bic": self.bic,
            "n_params": self.n_params,
            "n": self.n,
        }


def _partial_correlations(K: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(K))
    R = -K / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R


def gaussian_loglik(S: np.ndarray, K: np.ndarray, n: int) -> float:
    p = S.shape[0]
    sign, ld = np.linalg.slogdet(K)
    if sign <= 0:
        raise DegeneracyError("precision matrix is not positive definite")
    return 0.5 * n * (ld - float(np.trace(S @ K))) - 0.5 * p * n * math.log(2 * math.pi)


def bic(model: PrecisionModel, n: int | None = None) -> float:
    """``-2 loglik + n_params * log(n)``."""
    n = model.n if n is None else n
    return -2.0 * model.loglik + model.n_params * math.log(n)


def fit_precision(
    S: np.ndarray,
    graph: LatentGraph,
    n: int,
    tol: float = IPS_TOL,
    max_sweeps: int = IPS_MAX_SWEEPS,
) -> PrecisionModel:
    """Maximum-likelihood precision matrix with zeros on the non-edges of ``graph``.

    Iterative proportional scaling over maximal cliques until the largest
    change of a precision entry, relative to ``sqrt(K_ii K_jj)``, drops below
    ``tol``. Non-edge entries are never touched and stay exactly zero.
    """
    # contiguous input keeps the compiled kernels on one signature
    S = np.ascontiguousarray(S, dtype=float)
    p = len(graph.vertices)
    if S.shape != (p, p):
        raise PreconditionError(f"S must be {p}x{p}")
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegeneracyError("S is not positive definite")
    adj = np.zeros((p, p), dtype=np.bool_)
    idx = {v: i for i, v in enumerate(graph.vertices)}
    for a, b in graph.edges:
        adj[idx[a], idx[b]] = adj[idx[b], idx[a]] = True
    K, sweeps, ok = _ips(S, adj, _inverse_table(S), tol, max_sweeps)
    if not ok:
        resid = np.max(np.abs(np.linalg.inv(K) - S)[adj | np.eye(p, dtype=bool)])
        raise NonConvergenceError(f"IPS did not converge in {max_sweeps} sweeps (residual {resid:.3g})")
    cov = np.linalg.inv(K)
    cov = 0.5 * (cov + cov.T)
    R = _partial_correlations(K)
    ll = gaussian_loglik(S, K, n)
    n_params = p + len(graph.edges)
    pcs = {(a, b): float(R[idx[a], idx[b]]) for a, b in graph.sorted_edges()}
    return PrecisionModel(
        graph=graph,
        precision=K,
        covariance=cov,
        partial_correlations=pcs,
        loglik=ll,
        bic=-2.0 * ll + n_params * math.log(n),
        n_params=n_params,
        n=n,
        sweeps=int(sweeps),
    )


@dataclass(frozen=True)
class SearchTrace:
    """Scores of every graph visited by :func:`search_bic`."""

    masks: np.ndarray
    bic: np.ndarray
    feasible: np.ndarray


def score_graphs(
    S: np.ndarray,
    masks: np.ndarray,
    n: int,
    tol: float = IPS_TOL,
    threads: int = 1,
    max_sweeps: int = IPS_MAX_SWEEPS,
) -> tuple[np.ndarray, np.ndarray]:
    """BIC of each graph mask (bit ``b`` = b-th pair in lexicographic order).

    Work is split into contiguous chunks and concatenated in order, so the
    result does not depend on ``threads``.
    """
    S = np.ascontiguousarray(S, dtype=float)
    p = S.shape[0]
    pi, pj = _pairs(p)
    table = _inverse_table(S)
    masks = np.ascontiguousarray(masks, dtype=np.int64)
    chunks = np.array_split(masks, max(1, threads))

    def run(chunk):
        return _graph_scores(S, pi, pj, chunk, table, float(n), tol, max_sweeps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    ll = np.concatenate([a for a, _ in parts])
    ok = np.concatenate([b for _, b in parts])
    n_edges = np.array([bin(int(m)).count("1") for m in masks])
    scores = -2.0 * ll + (p + n_edges) * math.log(n)
    scores[~ok] = np.inf
    return scores, ok


def _pick(masks: np.ndarray, scores: np.ndarray) -> int:
    """Lowest BIC; ties to fewer edges, then lexicographically smallest edge list."""
    best = np.min(scores)
    if not np.isfinite(best):
        raise NonConvergenceError("no feasible graph")
    cand = [int(m) for m, s in zip(masks, scores) if s == best]

    def key(m):
        bits = [b for b in range(m.bit_length()) if (m >> b) & 1]
        return (len(bits), bits)

    return min(cand, key=key)


def search_bic(
    latent: LatentMatrix,
    strategy: str = "exhaustive",
    tol: float = IPS_TOL,
    threads: int = 1,
    return_trace: bool = False,
):
    """Select the BIC-minimal covariance selection model.

    ``exhaustive`` scores all ``2**(p(p-1)/2)`` graphs. ``stepwise`` starts at
    the saturated graph, repeatedly deletes the edge with the largest BIC drop,
    then adds edges the same way, alternating until neither move improves.
    """
    latent._require_inferential()
    S = sample_covariance(latent)
    n, p = latent.n, len(latent.labels)
    n_pairs = p * (p - 1) // 2
    if strategy == "exhaustive":
        masks = np.arange(1 << n_pairs, dtype=np.int64)
        scores, ok = score_graphs(S, masks, n, tol, threads)
        best = _pick(masks, scores)
        trace = SearchTrace(masks, scores, ok)
    elif strategy == "stepwise":
        best, trace = _stepwise(S, n, n_pairs, tol, threads)
    else:
        raise PreconditionError(f"unknown strategy {strategy!r}")
    model = fit_precision(S, mask_to_graph(best, latent.labels), n, tol)
    return (model, trace) if return_trace else model


def _stepwise(S, n, n_pairs, tol, threads):
    seen_m, seen_s, seen_ok = [], [], []
    cache = {}

    def score(masks):
        todo = np.array([m for m in masks if m not in cache], dtype=np.int64)
        if todo.size:
            sc, ok = score_graphs(S, todo, n, tol, threads)
            for m, s, o in zip(todo, sc, ok):
                cache[int(m)] = float(s)
                seen_m.append(int(m))
                seen_s.append(float(s))
                seen_ok.append(bool(o))
        return np.array([cache[m] for m in masks])

    current = (1 << n_pairs) - 1
    cur_score = score([current])[0]
    improved = True
    while improved:
        improved = False
        for removing in (True, False):
            while True:
                bits = [b for b in range(n_pairs) if bool((current >> b) & 1) == removing]
                if not bits:
                    break
                moves = [current ^ (1 << b) for b in bits]
                sc = score(moves)
                nxt = _pick(np.array(moves), sc)
                nxt_score = cache[nxt]
                if nxt_score < cur_score:
                    current, cur_score = nxt, nxt_score
                    improved = True
                else:
                    break
    trace = SearchTrace(np.array(seen_m), np.array(seen_s), np.array(seen_ok))
    return current, trace


# ----------------------------------------------------------------------------
# tests


class EdgeTest(NamedTuple):
    partial_correlation: float
    ci_low: float
    ci_high: float
    p_value: float


def _saturated_partial(latent: LatentMatrix) -> np.ndarray:
    S = sample_covariance(latent)
    return _partial_correlations(np.linalg.inv(S))


def _fisher_se(latent: LatentMatrix) -> float:
    p = len(latent.labels)
    return 1.0 / math.sqrt(latent.n - (p - 2) - 3)


def edge_test(latent: LatentMatrix, i: str, j: str, level: float = 0.95) -> EdgeTest:
    """Partial correlation of ``i`` and ``j`` given the other columns.

    Fisher z with standard error ``1/sqrt(n - (p - 2) - 3)``; two-sided
    normal p-value for zero partial correlation.
    """
    if i == j:
        raise PreconditionError("i and j must differ")
    latent._require_inferential()
    R = _saturated_partial(latent)
    a, b = latent.labels.index(i), latent.labels.index(j)
    r = float(R[a, b])
    if not abs(r) < 1:
        raise DegeneracyError(f"partial correlation of {i},{j} is {r}")
    z = math.atanh(r)
    se = _fisher_se(latent)
    q = norm.ppf(0.5 + level / 2)
    p = float(2 * norm.sf(abs(z) / se))
    return EdgeTest(r, math.tanh(z - q * se), math.tanh(z + q * se), p)


def compare_edges(latent: LatentMatrix, edge1: tuple[str, str], edge2: tuple[str, str]) -> float:
    """Two-sided p-value for equal partial correlations on two edges.

    Treats the two Fisher-z estimates as independent, which they are not
    (they come from the same tubes); the test is approximate.
    """
    if frozenset(edge1) == frozenset(edge2):
        raise PreconditionError("edges must be distinct")
    r1 = edge_test(latent, *edge1).partial_correlation
    r2 = edge_test(latent, *edge2).partial_correlation
    se = _fisher_se(latent)
    zdiff = (math.atanh(r1) - math.atanh(r2)) / (math.sqrt(2.0) * se)
    return float(2 * norm.sf(abs(zdiff)))
