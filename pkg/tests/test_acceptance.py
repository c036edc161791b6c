"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line (also collected in
the terminal summary) and then asserts it.
"""

import math
import time

import numpy as np
import pytest

from rieid.cli import check_linear, neuron_pipeline, run_dt_example
from rieid.data import Dataset
from rieid.experiments import (
    ExperimentSpec,
    dt_example_system,
    linear_samples,
    linear_trajectory,
    noisy_trajectory,
    random_certified_cubic,
    random_stable_linear,
    smooth_signals,
)
from rieid.fit import FitConfig, fit
from rieid.model import ModelClass, implicit_linear, linear_class
from rieid.rie import (
    MetricMatrix,
    bound_quadratic_form,
    equation_errors,
    lemma_matrix,
    local_rie_batch,
    local_rie_upper,
    stable_linear_embedding,
)
from rieid.sdp import FitOptions, assemble_global, assemble_local, compress_linear, extract_model, solve
from rieid.sim import (
    dissipation_traces,
    simulate,
    verify_bounds,
    well_posedness_probe,
)

from conftest import random_model

pytestmark = pytest.mark.acceptance


def test_criterion_01_linear_recovery(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_obj, worst_rec, ok = 0.0, 0.0, True
    for i in range(20):
        domain = "dt" if i % 2 == 0 else "ct"
        n, m, k = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        rep = check_linear(n, m, k, domain, seed=100 + i)
        ok &= rep["rank_condition"] and rep["objective"] <= 1e-6 and max(rep["recovery"].values()) <= 1e-4
        worst_obj = max(worst_obj, rep["objective"])
        worst_rec = max(worst_rec, max(rep["recovery"].values()))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    detail = f"20 systems, max objective {worst_obj:.1e}, max recovery residual {worst_rec:.1e}, {elapsed:.1f}s"
    assert acceptance(1, "linear exact recovery (DT and CT)", ok, detail)


def _bound_rows(rep):
    return {r.name: r for r in rep.ledger}


def test_criterion_02_bound_theorems(acceptance):
    rng = np.random.default_rng(0)
    counts = {"dt-linear": 0, "ct-linear": 0, "dt-cubic": 0}
    failures = []
    # linear certified instances: Lemma embeddings with a shrunken output map
    for domain, total in (("dt", 40), ("ct", 20)):
        for _ in range(total):
            n, m, k = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
            lm = random_stable_linear(n, m, k, domain, rng)
            emb = stable_linear_embedding(lm.A, 0.5 * lm.C, domain)
            model = implicit_linear(domain, emb.E, emb.F, emb.E @ lm.B, 0.5 * lm.C, lm.D)
            ds = linear_trajectory(lm, 60, rng, noise=0.1) if domain == "dt" else smooth_signals(n, m, k, 10.0, 201, rng)
            rows = _bound_rows(verify_bounds(model, MetricMatrix.from_Q(emb.Q), ds))
            for name in ("sim<=sum_global_rie", "linsim<=sum_local_rie"):
                if rows[name].status != "pass":
                    failures.append((domain, name, rows[name].lhs, rows[name].rhs))
            counts[f"{domain}-linear"] += 1
    # nonlinear certified instances (DT): cubic e, perturbed f
    for _ in range(40):
        n = int(rng.integers(1, 3))
        true, metric, _ = random_certified_cubic(n, 1, 1, rng)
        ds = noisy_trajectory(true, 40, rng, noise=0.1)
        model = true.with_(f_coef=true.f_coef * rng.uniform(0.8, 1.0))
        rows = _bound_rows(verify_bounds(model, metric, ds, probes=32))
        if rows["linsim<=sum_local_rie"].status != "pass":
            failures.append(("dt-cubic", "linsim", rows["linsim<=sum_local_rie"].lhs, rows["linsim<=sum_local_rie"].rhs))
        sim_row = rows["sim<=sum_global_rie"]
        # certified upper bound on the global RIE from the per-sample SOS program
        sol = solve(assemble_global(ModelClass.of_model(model), ds, FitOptions(metric=metric, monotone="off")),
                    accuracy="high")
        upper = sol.objective if sol.ok else math.inf
        if sim_row.status != "pass" and not sim_row.lhs <= upper * (1 + 1e-8):
            failures.append(("dt-cubic", "sim", sim_row.lhs, upper))
        if sim_row.rhs > upper * (1 + 1e-6) + 1e-9:
            failures.append(("dt-cubic", "probe above SOS bound", sim_row.rhs, upper))
        counts["dt-cubic"] += 1
    detail = ", ".join(f"{v} {k}" for k, v in counts.items()) + f", {len(failures)} violations"
    assert acceptance(2, "simulation-error bounds on certified instances", not failures, detail), failures


def test_criterion_03_upper_bound_chain(acceptance):
    rng = np.random.default_rng(3)
    violations, checked = 0, 0
    for _ in range(100):
        domain = "dt" if rng.random() < 0.5 else "ct"
        n, m, k = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        model = random_model(rng, domain, n, m, k, degree=3)
        A = rng.standard_normal((n, n))
        metric = MetricMatrix.from_Q(A @ A.T + 0.3 * np.eye(n))
        N = 10
        ds = Dataset(domain, np.arange(N), rng.standard_normal((N, m)), rng.standard_normal((N, k)),
                     x=rng.standard_normal((N, n)), v=rng.standard_normal((N, n)))
        lo, up = local_rie_batch(model, metric, ds), local_rie_batch(model, metric, ds, upper=True)
        finite = np.isfinite(up)
        violations += int(np.sum(lo[finite] > up[finite] + 1e-9 * (1 + np.abs(up[finite]))))
        violations += int(np.sum(np.isinf(lo) & finite))
        checked += N
    # H-form identity on the linear class
    worst = 0.0
    for _ in range(200):
        domain = "dt" if rng.random() < 0.5 else "ct"
        n, m, k = int(rng.integers(1, 4)), 1, int(rng.integers(1, 3))
        lm = random_stable_linear(n, m, k, domain, rng)
        emb = stable_linear_embedding(lm.A, lm.C, domain)
        F = emb.F + 0.05 * rng.standard_normal((n, n))
        model = implicit_linear(domain, emb.E, F, emb.E @ lm.B, lm.C, lm.D)
        metric = MetricMatrix.from_Q(emb.Q)
        s = (rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(m), rng.standard_normal(k))
        up = local_rie_upper(model, metric, s)
        err = equation_errors(model, s)
        hv = bound_quadratic_form(domain, emb.E, F, lm.C, metric.P, err.ex, err.ey)
        if math.isfinite(up):
            worst = max(worst, abs(hv - up) / (1 + abs(up)))
        elif math.isfinite(hv):
            worst = math.inf
    scalar = bound_quadratic_form("dt", [[1.0]], [[0.5]], [[0.5]], [[0.5]], [0.1], [0.0])
    ok = violations == 0 and worst <= 1e-9 and abs(scalar - 1 / 30) <= 1e-15
    detail = f"{checked} samples, {violations} violations, H-form max rel gap {worst:.1e}, scalar {scalar:.16f}"
    assert acceptance(3, "local RIE below its convex bound; H-form identity", ok, detail)


def test_criterion_04_lemma_constructions(acceptance):
    rng = np.random.default_rng(4)
    margins = {"dt": [], "ct": []}
    for domain in ("dt", "ct"):
        for _ in range(50):
            n, k = int(rng.integers(1, 7)), int(rng.integers(1, 3))
            lm = random_stable_linear(n, 1, k, domain, rng)
            emb = stable_linear_embedding(lm.A, lm.C, domain)
            M = lemma_matrix(domain, emb.E, emb.F, emb.Q, lm.C)
            margins[domain].append(-float(np.linalg.eigvalsh(M).max()))
    ok = min(margins["dt"]) > 0 and min(margins["ct"]) > 0
    detail = f"min margin DT {min(margins['dt']):.3g}, CT {min(margins['ct']):.3g} over 50 each"
    assert acceptance(4, "stable linear embeddings give a negative definite lemma matrix", ok, detail)


def test_criterion_05_well_posedness(acceptance):
    rng = np.random.default_rng(5)
    models = [dt_example_system()] + [random_certified_cubic(int(rng.integers(1, 4)), 1, 1, rng)[0] for _ in range(9)]
    worst_gap, worst_res, steps = math.inf, 0.0, 0
    for i, mdl in enumerate(models):
        worst_gap = min(worst_gap, well_posedness_probe(mdl, count=1000, radius=2.0, seed=i))
        U = 2.0 * rng.standard_normal((200, mdl.m))
        tr = simulate(mdl, U, np.zeros(mdl.n))
        worst_res = max(worst_res, float(tr.residuals.max() / mdl.r0))
        steps += tr.residuals.size - 1
    ok = worst_gap >= -1e-9 and worst_res <= 1e-9
    detail = f"{len(models)} models, min probe gap {worst_gap:.2e}, max residual/r0 {worst_res:.1e} over {steps} steps"
    assert acceptance(5, "monotone state map: probe inequality and step residuals", ok, detail)


def test_criterion_06_dissipation(acceptance):
    rng = np.random.default_rng(6)
    fitted, worst, tail = 0, -math.inf, -math.inf
    statuses = []
    while fitted < 20:
        n = int(rng.integers(1, 3))
        true, _, _ = random_certified_cubic(n, 1, 1, rng)
        ds = noisy_trajectory(true, 80, rng, amplitude=2.0, noise=0.05)
        res = fit(ds, FitConfig(deg_x=1, deg_e=3, r0=0.1, monotone="global-sos", stability="global-sos"))
        statuses.append(res.solution.status)
        if not res.ok:
            continue
        fitted += 1
        U = rng.standard_normal((100, 1))
        x0 = rng.standard_normal((100, n))
        x1 = x0 + rng.uniform(0.01, 1.0, size=(100, 1)) * rng.standard_normal((100, n))
        for tr in dissipation_traces(res.model, res.metric, U, x0, x1):
            worst = max(worst, tr.worst_excess / tr.scale)
            tail = max(tail, (float(tr.dy2.sum()) - float(tr.V[0])) / tr.scale)
        if len(statuses) > 40:
            break
    ok = fitted == 20 and worst <= 1e-8 and tail <= 1e-6
    detail = (f"{fitted} certified fits ({statuses.count('optimal')}/{len(statuses)} optimal), 100 pairs each, "
              f"max (dV+w)/scale {worst:.1e}, max (sum dy^2 - V(1))/scale {tail:.1e}")
    assert acceptance(6, "incremental dissipation along trajectory pairs", ok, detail)


def test_criterion_07_compression(acceptance):
    rng = np.random.default_rng(7)
    worst_gap, worst_excess = 0.0, -math.inf
    for domain in ("dt", "ct"):
        for affine in (False, True):
            for N in (50, 400):
                n, m, k = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
                lm = random_stable_linear(n, m, k, domain, rng)
                ds = linear_samples(lm, N, domain, rng, noise=0.1)
                cls = linear_class(domain, n, m, k, affine=affine, r0=1.0)
                full = solve(assemble_local(cls, ds), accuracy="high")
                prog = compress_linear(cls, ds)
                comp = solve(prog, accuracy="high")
                assert full.ok and comp.ok
                # evaluate each optimizer on the exact (uncompressed) objective
                vals = []
                for sol in (full, comp):
                    model, metric = extract_model(sol, cls)
                    vals.append(float(local_rie_batch(model, metric, ds, upper=True).sum()))
                worst_gap = max(worst_gap, abs(vals[0] - vals[1]) / max(abs(vals[0]), 1e-300))
                worst_excess = max(worst_excess, prog.count("psd", "rie") - (2 * n + m + k + int(affine)))
    ok = worst_gap <= 1e-8 and worst_excess <= 0
    detail = f"8 programs, max relative objective gap {worst_gap:.1e}, block count within 2n+m+k(+1)"
    assert acceptance(7, "compressed linear program matches the full program", ok, detail)


def test_criterion_08_dt_example(acceptance, tmp_path):
    t0 = time.perf_counter()
    summary = run_dt_example(ExperimentSpec(seed=42), tmp_path)
    elapsed = time.perf_counter() - t0
    rie, eq = summary["fits"]["local_rie"], summary["fits"]["eqerr"]
    ok = rie["stability_certified"] and summary["local_rie_better"] and elapsed < 600
    eq_err = "diverged" if eq["validation_error"]["value"] is None else f"{eq['validation_error']['value']:.3g}"
    detail = (f"validation error local RIE {rie['validation_error']['value']:.3g} vs equation error {eq_err}, "
              f"certified {rie['stability_certified']}, {elapsed:.0f}s")
    assert acceptance(8, "DT example: local RIE beats equation error", ok, detail)


def test_criterion_09_neuron_pipeline(acceptance, tmp_path):
    t0 = time.perf_counter()
    summary = neuron_pipeline(seed=0, out=tmp_path)
    elapsed = time.perf_counter() - t0
    ok = summary["states"] == 3 and summary["rows"]["subsample"] <= 500 and summary["certified"] and summary["bounded"]
    detail = (f"{summary['rows']['subsample']} samples, {summary['states']} states, max eig Rhat "
              f"{summary['max_eig_Rhat_samples']:.2e}, bounded {summary['bounded']}, {elapsed:.0f}s")
    assert acceptance(9, "synthetic neuron pipeline (CT, degree 4)", ok, detail)


def _richardson_jacobian(fun, X, h=1e-3):
    """Fourth-order central differences."""
    cols = []
    for j in range(X.shape[1]):
        d = np.zeros_like(X)
        d[:, j] = h
        cols.append((8 * (fun(X + d) - fun(X - d)) - (fun(X + 2 * d) - fun(X - 2 * d))) / (12 * h))
    return np.stack(cols, axis=-1)


def test_criterion_10_jacobians(acceptance):
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(100):
        domain = "dt" if i % 2 == 0 else "ct"
        n, m, k = int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(1, 3))
        d_x = int(rng.integers(0, 2)) if domain == "ct" else 0
        d_u = int(rng.integers(0, 2)) if domain == "ct" and m else 0
        mdl = random_model(rng, domain, n, m, k, degree=int(rng.integers(1, 5)), d_x=d_x, d_u=d_u)
        X = rng.uniform(-1.5, 1.5, size=(4, n))
        U = rng.uniform(-1.5, 1.5, size=(4, m))
        ev = mdl.evaluate_batch(X, U)
        for J, f in ((ev.E, mdl.e_values), (ev.F, lambda Z: mdl.f_jac(Z, U)[0]), (ev.G, lambda Z: mdl.g_jac(Z, U)[0])):
            fd = _richardson_jacobian(f, X)
            scale = np.maximum(np.abs(fd).max(axis=(1, 2), keepdims=True), 1e-12)
            worst = max(worst, float((np.abs(J - fd) / scale).max()))
    ok = worst <= 1e-6
    detail = f"100 models x 4 points, max relative deviation {worst:.1e}"
    assert acceptance(10, "Jacobians match finite differences", ok, detail)
