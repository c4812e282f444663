"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data_model import load_dataset, write_dataset
from .derived import intensity_table, scatter_table
from .errors import ConfigError, DataError, NonConvergenceError, NumericError, PreconditionError, RhizoError
from .glmm import FittedMarginal
from .latent_graph import LABELS, LatentGraph, export_dag, graph_from_dot, induced_separation, separates, stage_responses, to_dot
from .pipeline import AnalysisConfig, _clean, fit_all, latent_matrix, render_text, run_pipeline, select_graph
from .simulator import SimulationConfig, structured_sigma, simulate, write_truth

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NONCONV = 0, 2, 3, 4


def _config(args) -> AnalysisConfig:
    return AnalysisConfig(
        quad_order=args.quad_order,
        ips_tol=args.ips_tol,
        search=args.search,
        alpha=args.alpha,
        line_spacing=args.line_spacing,
        threads=args.threads,
        allow_unconverged=args.allow_unconverged,
        method=args.method,
        seed=args.seed,
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_fits(path) -> dict[str, FittedMarginal]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return {d["label"]: FittedMarginal.from_dict(d) for d in doc["fits"]}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read fits file {path}: {exc}") from exc


def cmd_simulate(args) -> None:
    sigma = structured_sigma(args.strength) if args.strength is not None else None
    cfg = SimulationConfig(n_treatments=args.treatments, tubes_per_treatment=args.tubes, seed=args.seed or 0)
    if sigma is not None:
        cfg.sigma = sigma
    data, truth = simulate(cfg)
    out = _outdir(args)
    write_dataset(data, out / "data.csv")
    write_truth(truth, out / "truth.csv")


def cmd_fit(args) -> None:
    fits = fit_all(load_dataset(args.input), _config(args))
    _write_json(_outdir(args) / "fits.json", {"fits": [fits[lab].to_dict() for lab in LABELS]})


def cmd_derive(args) -> None:
    fits = _load_fits(args.input)
    doc = {
        "scatter": [r for lab in LABELS if lab[0] == "U" for r in scatter_table(fits[lab])],
        "intensity": [r for lab in LABELS if lab[0] == "V" for r in intensity_table(fits[lab], args.line_spacing)],
    }
    _write_json(_outdir(args) / "derived.json", doc)


def cmd_select(args) -> None:
    cfg = _config(args)
    fits = _load_fits(args.input)
    graph, model, active = select_graph(latent_matrix(fits), cfg)
    out = _outdir(args)
    doc = {"edges": [list(e) for e in graph.sorted_edges()], "active_vertices": list(active)}
    doc["bic"] = None if model is None else model.bic
    _write_json(out / "graph.json", doc)
    (out / "graph.dot").write_text(to_dot(graph), encoding="utf-8")
    (out / "dag.dot").write_text(export_dag(graph), encoding="utf-8")


def cmd_separation(args) -> None:
    try:
        graph = graph_from_dot(Path(args.input).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    split = lambda s: [v for v in s.split(",") if v]  # noqa: E731
    doc = {
        "S": split(args.S),
        "A": split(args.A),
        "B": split(args.B),
        "separated": separates(graph, split(args.S), split(args.A), split(args.B)),
    }
    stmt = induced_separation(graph, stage_responses(1), stage_responses(3))
    doc["stage1_vs_stage3"] = None if stmt is None else str(stmt)
    print(json.dumps(doc, sort_keys=True))


def cmd_report(args) -> None:
    try:
        rep = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read report {args.input}: {exc}") from exc
    sys.stdout.write(render_text(rep))


def cmd_pipeline(args) -> None:
    report = run_pipeline(load_dataset(args.input), _config(args))
    out = _outdir(args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    graph = LatentGraph.from_edges([tuple(e) for e in report.graph["edges"]])
    (out / "graph.dot").write_text(to_dot(graph), encoding="utf-8")
    (out / "dag.dot").write_text(export_dag(graph), encoding="utf-8")


def _analysis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--quad-order", type=int, default=15, help="Gauss-Hermite order for the marginal likelihood")
    p.add_argument("--ips-tol", type=float, default=1e-8, help="IPS convergence tolerance")
    p.add_argument("--search", choices=("exhaustive", "stepwise"), default="exhaustive")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level for edge tests")
    p.add_argument("--line-spacing", type=float, default=None, help="grid line spacing; enables root length")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--allow-unconverged", action="store_true")
    p.add_argument("--method", choices=("reml", "ml"), default="reml", help="variance estimator")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhizograph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, needs_input=True, output=True, analysis=False):
        p = sub.add_parser(name, help=help_)
        if needs_input:
            p.add_argument("--input", required=True)
        if output:
            p.add_argument("--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if analysis:
            _analysis_flags(p)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "simulate a dataset", needs_input=False)
    p.add_argument("--treatments", type=int, default=4)
    p.add_argument("--tubes", type=int, default=6, help="tubes per treatment")
    p.add_argument("--strength", type=float, default=None, help="use the structured covariance at this strength")
    add("fit", cmd_fit, "fit the six marginal GLMMs", analysis=True)
    p = add("derive", cmd_derive, "scatter and intensity tables from fits.json")
    p.add_argument("--line-spacing", type=float, default=None)
    add("select", cmd_select, "BIC graph selection from fits.json", analysis=True)
    p = add("separation", cmd_separation, "separation query on a graph.dot", output=False)
    p.add_argument("--S", default="U2,V2")
    p.add_argument("--A", default="U1,V1")
    p.add_argument("--B", default="U3,V3")
    add("report", cmd_report, "render report.json as text", output=False)
    add("pipeline", cmd_pipeline, "run the full analysis", analysis=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DataError, PreconditionError, ConfigError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (NumericError, RhizoError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
