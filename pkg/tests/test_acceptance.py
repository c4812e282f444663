"""Acceptance criteria, one test each.

Every test records a single ``PASS``/``FAIL`` line (shown in the terminal
summary and on stdout) before asserting, so a failing criterion still reports
its measured numbers.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
from scipy.special import expit

from conftest import ACCEPTANCE_LINES
from helpers import buffon_polyline_crossings, polyline_length
from rhizograph import cli
from rhizograph.data_model import Dataset, WindowRecord, write_dataset
from rhizograph.derived import intensity, noodle_length, scatter_probability
from rhizograph.ggm import LatentMatrix, edge_test, fit_precision, sample_covariance
from rhizograph.glmm import MarginalSpec, fit_marginal, marginal_loglik, marginal_score
from rhizograph.latent_graph import LatentGraph, separates
from rhizograph.pipeline import AnalysisConfig, run_pipeline
from rhizograph.quadrature import mc_expect_under_normal
from rhizograph.simulator import SimulationConfig, structure_graph, structured_sigma, simulate

GRID = [(b, s2) for b in (-2.0, 0.0, 2.0) for s2 in (0.25, 1.0, 4.0)]


def record(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_c01_scatter_quadrature_vs_monte_carlo():
    t0 = time.perf_counter()
    worst, half = 0.0, 0.0
    for i, (b, s2) in enumerate(GRID):
        q = scatter_probability(b, s2)
        est, se = scatter_probability(b, s2, method="monte_carlo", n_samples=1_000_000, seed=i)
        worst = max(worst, abs(q - est) / se)
        if b == 0:
            half = max(half, abs(q - 0.5))
    elapsed = time.perf_counter() - t0
    ok = worst < 3 and half < 1e-10 and elapsed < 5
    record(1, ok, f"max |quad-MC|/se = {worst:.2f} (<3), max |alpha(0)-0.5| = {half:.1e}, {elapsed:.2f} s")


def test_c02_intensity_closed_form_vs_monte_carlo():
    t0 = time.perf_counter()
    worst, zero = 0.0, 0.0
    for i, (th, s2) in enumerate(GRID):
        est, se = mc_expect_under_normal(lambda v: np.exp(th + v), s2, 1_000_000, 100 + i)
        worst = max(worst, abs(intensity(th, s2) - est) / se)
        zero = max(zero, abs(intensity(th, 0.0) - math.exp(th)))
    elapsed = time.perf_counter() - t0
    ok = worst < 3 and zero < 1e-12 and elapsed < 5
    record(2, ok, f"max |closed-MC|/se = {worst:.2f} (<3), sigma2=0 error {zero:.1e}, {elapsed:.2f} s")


def test_c03_gradient_vs_finite_differences():
    t0 = time.perf_counter()
    data, _ = simulate(SimulationConfig(seed=31))
    rng = np.random.default_rng(32)
    worst = 0.0
    h = 1e-5
    for spec in (MarginalSpec("binomial_logit", 1), MarginalSpec("poisson_log", 2)):
        for _ in range(10):
            coef = rng.normal(0, 0.8, (4, 3))
            s2 = float(rng.uniform(0.2, 2.5))
            x0 = np.r_[coef.ravel(), math.log(s2)]

            def f(x):
                return marginal_loglik(data, spec, x[:12].reshape(4, 3), math.exp(x[12]))

            fd = np.array([(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(13)])
            g = marginal_score(data, spec, coef, s2)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    record(3, worst < 1e-4 and elapsed < 30, f"max relative gradient error {worst:.2e} (<1e-4), {elapsed:.1f} s")


def test_c04_parameter_recovery():
    t0 = time.perf_counter()
    n_rep = 200
    covered = {"binomial_logit": [], "poisson_log": []}
    sigma2 = {"binomial_logit": [], "poisson_log": []}
    cfg0 = SimulationConfig()
    for rep in range(n_rep):
        data, _ = simulate(SimulationConfig(seed=10_000 + rep))
        for fam, truth in (("binomial_logit", cfg0.beta), ("poisson_log", cfg0.theta)):
            fit = fit_marginal(data, MarginalSpec(fam, 1))
            sigma2[fam].append(fit.sigma2)
            for (t, z), v in fit.coefficients.items():
                lo, hi = fit.wald_interval(t, z)
                # a separated cell has no finite interval and counts as a miss
                covered[fam].append(bool(lo <= truth[(t, z, 1)] <= hi))
    elapsed = time.perf_counter() - t0
    cov = {f: float(np.mean(c)) for f, c in covered.items()}
    mean_s2 = {f: float(np.mean(s)) for f, s in sigma2.items()}
    ok = all(c >= 0.90 for c in cov.values()) and all(abs(m - 1) <= 0.15 for m in mean_s2.values())
    ok = ok and elapsed < 600
    detail = ", ".join(f"{f}: coverage {cov[f]:.3f}, mean sigma2 {mean_s2[f]:.3f}" for f in cov)
    record(4, ok, f"{detail}, {elapsed:.0f} s")


def test_c05_offset_and_reflection():
    data, _ = simulate(SimulationConfig(seed=55))
    poi, binom = MarginalSpec("poisson_log", 1), MarginalSpec("binomial_logit", 1)
    doubled = Dataset(
        WindowRecord(r.stage, r.treatment, r.tube, r.zone, 2 * r.n_windows, r.windows_with_roots, r.crossings)
        for r in data
    )
    flipped = Dataset(
        WindowRecord(r.stage, r.treatment, r.tube, r.zone, r.n_windows, r.n_windows - r.windows_with_roots, r.crossings)
        for r in data
    )
    a, b = fit_marginal(data, poi), fit_marginal(doubled, poi)
    shift = max(abs(b.coefficients[c] - a.coefficients[c] + math.log(2)) for c in a.coefficients)
    a, b = fit_marginal(data, binom), fit_marginal(flipped, binom)
    neg = max(abs(a.coefficients[c] + b.coefficients[c]) for c in a.coefficients)
    record(5, shift < 1e-6 and neg < 1e-6, f"theta shift error {shift:.1e}, beta negation error {neg:.1e} (<1e-6)")


def test_c06_ips_oracles():
    x = np.random.default_rng(6).multivariate_normal(np.zeros(6), structured_sigma(0.3), size=200)
    S = sample_covariance(LatentMatrix(x))
    S3 = S[:3, :3]
    chain = LatentGraph.from_edges([("U1", "U2"), ("U2", "U3")], ("U1", "U2", "U3"))
    fit_precision(S, LatentGraph.saturated(), 200)  # compile outside the timed region
    t0 = time.perf_counter()
    sat = fit_precision(S, LatentGraph.saturated(), 200)
    emp = fit_precision(S, LatentGraph.empty(), 200)
    ch = fit_precision(S3, chain, 200)
    elapsed = time.perf_counter() - t0
    e_sat = float(np.max(np.abs(sat.covariance - S)))
    off = emp.covariance - np.diag(np.diag(emp.covariance))
    e_emp = float(np.max(np.abs(off)) + np.max(np.abs(np.diag(emp.covariance) - np.diag(S))))
    C = ch.covariance
    e_ch = abs(C[0, 2] - C[0, 1] * C[1, 2] / C[1, 1])
    ok = e_sat < 1e-10 and e_emp < 1e-12 and e_ch < 1e-6 and elapsed < 1
    record(6, ok, f"saturated {e_sat:.1e}, empty {e_emp:.1e}, chain {e_ch:.1e}, {elapsed * 1e3:.1f} ms")


def test_c07_graph_recovery():
    t0 = time.perf_counter()
    truth = structure_graph()
    sigma = structured_sigma(0.3)
    exact = clean = 0
    n_rep = 50
    misses = []
    for seed in range(n_rep):
        data, _ = simulate(SimulationConfig(tubes_per_treatment=125, sigma=sigma, seed=seed))
        rep = run_pipeline(data, AnalysisConfig(seed=seed))
        edges = {tuple(e) for e in rep.graph["edges"]}
        exact += edges == set(truth.edges)
        cross = [e for e in edges if {e[0][1], e[1][1]} == {"1", "3"}]
        clean += not cross
        if edges != set(truth.edges):
            misses.append((seed, sorted(edges ^ set(truth.edges))))
    elapsed = time.perf_counter() - t0
    ok = exact >= 0.80 * n_rep and clean >= 0.95 * n_rep and elapsed < 1200
    record(
        7,
        ok,
        f"exact {exact}/{n_rep} (need >=40), no stage-1/3 edge {clean}/{n_rep} (need >=48), "
        f"{elapsed:.0f} s; differing seeds {misses}",
    )


def test_c08_separation():
    g = structure_graph()
    t0 = time.perf_counter()
    full = separates(g, {"U2", "V2"}, {"U1", "V1"}, {"U3", "V3"})
    partial = separates(g, {"U2"}, {"U1", "V1"}, {"U3", "V3"})
    elapsed = time.perf_counter() - t0
    repeat = all(separates(g, {"U2", "V2"}, {"U1", "V1"}, {"U3", "V3"}) for _ in range(100))
    ok = full and not partial and repeat and elapsed < 1e-3
    record(8, ok, f"S={{U2,V2}}: {full}, S={{U2}}: {partial}, {elapsed * 1e6:.0f} us for both queries")


def test_c09_edge_test_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    rejections = 0
    for _ in range(1000):
        lm = LatentMatrix(rng.standard_normal((200, 6)))
        rejections += edge_test(lm, "U1", "V3").p_value < 0.05
    K = np.eye(6)
    K[0, 3] = K[3, 0] = -0.5
    sigma = np.linalg.inv(K)
    factor = np.linalg.cholesky(sigma)
    hits = 0
    for _ in range(500):
        lm = LatentMatrix(rng.standard_normal((2000, 6)) @ factor.T)
        res = edge_test(lm, "U1", "V1")
        hits += res.ci_low <= 0.5 <= res.ci_high
    elapsed = time.perf_counter() - t0
    rate, cover = rejections / 1000, hits / 500
    ok = abs(rate - 0.05) <= 0.02 and abs(cover - 0.95) <= 0.02 and elapsed < 600
    record(9, ok, f"null rejection {rate:.3f} (0.05+-0.02), CI coverage {cover:.3f} (0.95+-0.02), {elapsed:.1f} s")


def test_c10_buffon_noodle():
    t0 = time.perf_counter()
    # a fixed, irregular polyline: a seeded random walk of 40 segments
    verts = np.cumsum(np.random.default_rng(10).normal(0, 0.3, (41, 2)), axis=0)
    L = polyline_length(verts)
    crossings = buffon_polyline_crossings(verts, 100_000, seed=11)
    est = noodle_length(float(crossings.mean()), 1.0)
    elapsed = time.perf_counter() - t0
    rel = abs(est / L - 1)
    record(10, rel < 0.02 and elapsed < 30, f"(pi/2) mean crossings {est:.4f} vs L {L:.4f}, rel error {rel:.4f}")


def test_c11_determinism(tmp_path):
    data, _ = simulate(SimulationConfig(tubes_per_treatment=20, sigma=structured_sigma(0.3), seed=11))
    path = tmp_path / "data.csv"
    write_dataset(data, path)
    names = ("report.json", "report.txt", "graph.dot", "dag.dot")
    outputs = []
    for i, threads in enumerate(("8", "8", "1")):
        out = tmp_path / f"run{i}"
        code = cli.main(["pipeline", "--input", str(path), "--output", str(out), "--seed", "11", "--threads", threads])
        assert code == 0
        outputs.append([(out / n).read_bytes() for n in names])
    same_twice = outputs[0] == outputs[1]
    same_threads = outputs[0] == outputs[2]
    record(11, same_twice and same_threads, f"repeat identical: {same_twice}, threads 8 vs 1 identical: {same_threads}")
