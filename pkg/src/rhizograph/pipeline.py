"""End-to-end analysis: six marginal fits -> latent matrix -> graph -> tests."""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from .data_model import STAGES, Dataset
from .derived import intensity_table, scatter_table
from .errors import NonConvergenceError, RhizoError
from .ggm import LatentMatrix, compare_edges, edge_test, search_bic
from .glmm import FittedMarginal, MarginalSpec, fit_marginal
from .latent_graph import LABELS, LatentGraph, induced_separation, separates, stage_responses

TEST_NOTE = (
    "Edge tests are Fisher-z tests of partial correlations between predicted "
    "tube components (posterior modes), not of the latent components "
    "themselves. Equality tests treat the two Fisher-z estimates as "
    "independent, which is an approximation."
)


@dataclass
class AnalysisConfig:
    quad_order: int = 15
    ips_tol: float = 1e-8
    search: str = "exhaustive"
    alpha: float = 0.05
    line_spacing: float | None = None
    threads: int | None = None
    allow_unconverged: bool = False
    method: str = "reml"
    seed: int | None = None

    def n_threads(self) -> int:
        return self.threads if self.threads else (os.cpu_count() or 1)


def _tagged(module: str, exc: Exception) -> Exception:
    if isinstance(exc, RhizoError) and not str(exc).startswith("["):
        return type(exc)(f"[{module}] {exc}")
    return exc


@dataclass
class AnalysisReport:
    fits: list[dict]
    scatter: list[dict]
    intensity: list[dict]
    zero_latent: list[str]
    graph: dict
    edge_tests: list[dict]
    comparisons: list[dict]
    separation: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        return render_text(self.to_dict())


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fit_all(dataset: Dataset, config: AnalysisConfig) -> dict[str, FittedMarginal]:
    """The six marginal fits, keyed by latent label."""
    specs = [MarginalSpec.from_label(lab) for lab in LABELS]

    def one(spec):
        try:
            return fit_marginal(dataset, spec, order=config.quad_order, method=config.method)
        except RhizoError as exc:
            raise _tagged("glmm", exc) from exc

    threads = min(config.n_threads(), len(specs))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(one, specs))
    else:
        fits = [one(s) for s in specs]
    out = {s.label: f for s, f in zip(specs, fits)}
    bad = [lab for lab, f in out.items() if not f.converged]
    if bad and not config.allow_unconverged:
        detail = "; ".join(f"{lab}: {out[lab].message}" for lab in bad)
        raise NonConvergenceError(f"[glmm] marginal fits did not converge ({detail})")
    return out


def latent_matrix(fits: dict[str, FittedMarginal]) -> LatentMatrix:
    return LatentMatrix.from_predictions({lab: fits[lab].latent_predictions for lab in LABELS})


def select_graph(latent: LatentMatrix, config: AnalysisConfig):
    """Graph search on the non-degenerate columns; constant columns stay isolated.

    Returns ``(graph, model_or_None, active_labels)``.
    """
    sd = latent.values.std(axis=0)
    active = tuple(lab for lab, s in zip(latent.labels, sd) if s > 0)
    if len(active) < 2:
        return LatentGraph.empty(latent.labels), None, active
    try:
        model = search_bic(latent.subset(active), config.search, config.ips_tol, config.n_threads())
    except RhizoError as exc:
        raise _tagged("ggm", exc) from exc
    graph = LatentGraph.from_edges(model.graph.edges, latent.labels)
    return graph, model, active


def run_pipeline(dataset: Dataset, config: AnalysisConfig | None = None) -> AnalysisReport:
    config = config or AnalysisConfig()
    fits = fit_all(dataset, config)

    try:
        scatter = [row for d in STAGES for row in scatter_table(fits[f"U{d}"])]
        intens = [row for d in STAGES for row in intensity_table(fits[f"V{d}"], config.line_spacing)]
    except RhizoError as exc:
        raise _tagged("derived", exc) from exc

    latent = latent_matrix(fits)
    zero = [lab for lab in LABELS if not np.any(latent.values[:, LABELS.index(lab)])]
    graph, model, active = select_graph(latent, config)

    tests, comparisons = [], []
    if model is not None:
        sub = latent.subset(active)
        try:
            for a, b in itertools.combinations(active, 2):
                res = edge_test(sub, a, b, level=1 - config.alpha)
                tests.append(
                    {
                        "edge": [a, b],
                        "in_graph": graph.has_edge(a, b),
                        "partial_correlation": res.partial_correlation,
                        "ci_low": res.ci_low,
                        "ci_high": res.ci_high,
                        "p_value": res.p_value,
                        "significant": res.p_value < config.alpha,
                    }
                )
            same_stage = [(f"U{d}", f"V{d}") for d in STAGES if f"U{d}" in active and f"V{d}" in active]
            for e1, e2 in itertools.combinations(same_stage, 2):
                comparisons.append({"edge1": list(e1), "edge2": list(e2), "p_value": compare_edges(sub, e1, e2)})
        except RhizoError as exc:
            raise _tagged("ggm", exc) from exc

    S, A, B = {"U2", "V2"}, {"U1", "V1"}, {"U3", "V3"}
    markov = separates(graph, S, A, B)
    stmt = induced_separation(graph, stage_responses(1), stage_responses(3))
    separation = {
        "query": {"S": sorted(S), "A": sorted(A), "B": sorted(B)},
        "separated": markov,
        "first_order_markov": markov,
        "stage1_vs_stage3": None
        if stmt is None
        else {"given_latent": sorted(stmt.S), "statement": str(stmt)},
    }

    return AnalysisReport(
        fits=[fits[lab].to_dict() | {"label": lab} for lab in LABELS],
        scatter=scatter,
        intensity=intens,
        zero_latent=zero,
        graph={
            "vertices": list(graph.vertices),
            "edges": [list(e) for e in graph.sorted_edges()],
            "active_vertices": list(active),
            "bic": None if model is None else model.bic,
            "loglik": None if model is None else model.loglik,
            "n_tubes": latent.n,
            "search": config.search,
        },
        edge_tests=tests,
        comparisons=comparisons,
        separation=separation,
        metadata={
            "package_version": __version__,
            "numpy_version": np.__version__,
            "scipy_version": scipy.__version__,
            "seed": config.seed,
            "quad_order": config.quad_order,
            "ips_tol": config.ips_tol,
            "alpha": config.alpha,
            "line_spacing": config.line_spacing,
            "variance_estimator": config.method,
            "latent_prediction": "posterior mode",
            "test_note": TEST_NOTE,
        },
    )


def _fmt(v, spec=".4f"):
    return "NA" if v is None else format(v, spec)


def render_text(rep: dict) -> str:
    out = ["Marginal fits", "============="]
    for f in rep["fits"]:
        flag = "converged" if f["converged"] else "NOT CONVERGED"
        out.append(
            f"{f['label']:<3} {f['family']:<15} sigma2={_fmt(f['sigma2'])}  "
            f"loglik={_fmt(f['log_likelihood'], '.3f')}  {flag}"
            + (f"  [{f['message']}]" if f["message"] else "")
        )
        for c in f["coefficients"]:
            out.append(f"      t={c['treatment']} z={c['zone']}  {_fmt(c['estimate'])} ({_fmt(c['se'])})")
    out += ["", "Scatter (probability of roots per window)", "-" * 41]
    for r in rep["scatter"]:
        out.append(f"  d={r['stage']} t={r['treatment']} z={r['zone']}  {_fmt(r['alpha'])} ({_fmt(r['se'])})")
    out += ["", "Intensity (crossings per window)", "-" * 32]
    for r in rep["intensity"]:
        extra = f"  length={_fmt(r['length_per_window'])}" if "length_per_window" in r else ""
        out.append(f"  d={r['stage']} t={r['treatment']} z={r['zone']}  {_fmt(r['omega'])} ({_fmt(r['se'])}){extra}")
    if rep["zero_latent"]:
        out += ["", "All-zero latent predictions: " + ", ".join(rep["zero_latent"])]
    g = rep["graph"]
    out += ["", "Selected graph", "-" * 14, f"  BIC={_fmt(g['bic'], '.3f')}  edges={len(g['edges'])}"]
    out += [f"  {a} -- {b}" for a, b in g["edges"]]
    out += ["", "Partial correlations (saturated model)", "-" * 38]
    for t in rep["edge_tests"]:
        mark = "*" if t["in_graph"] else " "
        out.append(
            f" {mark}{t['edge'][0]}-{t['edge'][1]}  r={_fmt(t['partial_correlation'])} "
            f"[{_fmt(t['ci_low'])}, {_fmt(t['ci_high'])}]  p={_fmt(t['p_value'], '.3g')}"
        )
    if rep["comparisons"]:
        out += ["", "Equality of same-stage scatter/intensity partial correlations", "-" * 61]
        for c in rep["comparisons"]:
            out.append(f"  {'-'.join(c['edge1'])} vs {'-'.join(c['edge2'])}: p={_fmt(c['p_value'], '.3g')}")
    s = rep["separation"]
    out += ["", "Separation", "-" * 10]
    out.append(
        f"  {{{', '.join(s['query']['S'])}}} separates {{{', '.join(s['query']['A'])}}} and "
        f"{{{', '.join(s['query']['B'])}}}: {s['separated']}"
    )
    st = s["stage1_vs_stage3"]
    out.append("  stage 1 vs stage 3 responses: " + ("no separating latent set" if st is None else st["statement"]))
    out += ["", "Note: " + rep["metadata"]["test_note"]]
    return "\n".join(out) + "\n"
