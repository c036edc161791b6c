import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rieid.data import DataError, Dataset
from rieid.experiments import linear_samples, random_stable_linear
from rieid.model import DegreeError, ImplicitModel, ModelClass, build_basis, implicit_linear, linear_class, linear_parts
from rieid.rie import MetricMatrix, local_rie_batch, local_rie_upper, max_eig_batch, stable_linear_embedding
from rieid.sdp import (
    Affine,
    ConicProgram,
    FitOptions,
    add_global_monotonicity,
    assemble_equation_error,
    assemble_global,
    assemble_local,
    assemble_stability_certificate,
    compress_linear,
    extract_model,
    solve,
)
from rieid.sdp.assemble import declare


def one_sample(domain, v, x, u, y):
    return Dataset(domain, [0.0], [[u]], [[y]], x=[[x]], v=[[v]])


def fixed_linear(domain, E, F, L, G, H):
    return ModelClass.of_model(implicit_linear(domain, [[E]], [[F]], [[L]], [[G]], [[H]]))


# -- toy programs --------------------------------------------------------------------


def test_trivial_feasible_and_infeasible():
    prog = ConicProgram()
    prog.add_psd(Affine(np.eye(1)))
    assert solve(prog).status == "optimal"
    bad = ConicProgram()
    bad.add_variable("z", (1, 1))
    bad.add_psd(Affine(np.diag([1.0, -1.0])))
    assert solve(bad).status == "infeasible"


def test_unknown_solver_rejected(monkeypatch):
    with pytest.raises(ValueError):
        solve(ConicProgram(), solver="mosek-ish")
    monkeypatch.setenv("RIEID_SOLVER", "nope")
    with pytest.raises(ValueError):
        solve(ConicProgram())


def test_sdpa_export(tmp_path):
    prog = ConicProgram()
    z = prog.add_variable("z", (1, 1))
    prog.add_psd(Affine.bmat([[z, Affine(np.ones((1, 1)))], [Affine(np.ones((1, 1))), Affine(np.ones((1, 1)))]]))
    prog.add_eq(z - 2.0)
    prog.minimize(z)
    path = tmp_path / "p.dat-s"
    prog.to_sdpa(path)
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("*")]
    assert lines[0] == "1" and lines[1] == "2" and lines[2].split() == ["2", "-2"]
    assert float(lines[3]) == 1.0
    entries = [ln.split() for ln in lines[4:]]
    assert all(len(e) == 5 for e in entries)
    assert ["1", "1", "1", "1", "1.0"] in entries


# -- local program vs closed form -------------------------------------------------------


def test_single_sample_reproduces_upper_bound():
    cls = fixed_linear("dt", 1.0, 0.5, 0.0, 0.5, 0.0)
    ds = one_sample("dt", -0.1, 0.0, 0.0, 0.0)
    sol = solve(assemble_local(cls, ds, FitOptions(metric=MetricMatrix.from_P([[0.5]]))), accuracy="high")
    assert sol.ok and sol.objective == pytest.approx(1 / 30, abs=1e-6)


def test_single_exact_sample_gives_zero():
    cls = fixed_linear("dt", 1.0, 0.5, 1.0, 0.5, 0.0)
    ds = one_sample("dt", 0.5 * 0.4 + 0.3, 0.4, 0.3, 0.2)
    sol = solve(assemble_local(cls, ds, FitOptions(metric=MetricMatrix.from_P([[0.5]]))))
    assert abs(sol.objective) < 1e-7


def test_lmi_sup_equivalence_random():
    rng = np.random.default_rng(7)
    for trial in range(100):
        domain = "dt" if trial % 2 == 0 else "ct"
        n, m, k = int(rng.integers(1, 3)), 1, int(rng.integers(1, 3))
        lm = random_stable_linear(n, m, k, domain, rng)
        emb = stable_linear_embedding(lm.A, lm.C, domain)
        mdl = implicit_linear(domain, emb.E, emb.F + 0.05 * rng.standard_normal((n, n)), emb.E @ lm.B, lm.C, lm.D)
        metric = MetricMatrix.from_Q(emb.Q)
        ds = Dataset(domain, [0.0], rng.standard_normal((1, m)), rng.standard_normal((1, k)),
                     x=rng.standard_normal((1, n)), v=rng.standard_normal((1, n)))
        ref = float(local_rie_batch(mdl, metric, ds, upper=True)[0])
        sol = solve(assemble_local(ModelClass.of_model(mdl), ds, FitOptions(metric=metric, monotone="off")), accuracy="high")
        if not np.isfinite(ref):
            assert sol.status == "infeasible"
            continue
        assert sol.ok
        assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_ct_single_sample_tight():
    cls = fixed_linear("ct", 1.0, -1.0, 0.0, 1.0, 0.0)
    ds = one_sample("ct", -0.1, 0.0, 0.0, 0.0)
    sol = solve(assemble_local(cls, ds, FitOptions(metric=MetricMatrix.identity(1))), accuracy="high")
    assert sol.objective == pytest.approx(0.01, abs=1e-6)


# -- recovery and compression -------------------------------------------------------------


@pytest.mark.parametrize("domain", ["dt", "ct"])
def test_recovery_end_to_end(domain):
    rng = np.random.default_rng(11)
    lm = random_stable_linear(2, 1, 1, domain, rng)
    ds = linear_samples(lm, 12, domain, rng)
    cls = linear_class(domain, 2, 1, 1, r0=1.0)
    sol = solve(assemble_local(cls, ds), solver="cvxopt", accuracy="high")
    assert sol.ok and abs(sol.objective) < 1e-6
    model, metric = extract_model(sol, cls)
    E, F, L, G, H, _, _ = linear_parts(model)
    res = lm.recovery_residuals(E, F, L, G, H)
    assert res["EA=F"] < 1e-4 and max(res.values()) < 1e-3
    assert metric is not None and metric.residual() < 1e-6


def _compression_case(domain, N, rng, affine=False):
    lm = random_stable_linear(2, 1, 2, domain, rng)
    ds = linear_samples(lm, N, domain, rng, noise=0.1)
    return linear_class(domain, 2, 1, 2, affine=affine, r0=1.0), ds


@pytest.mark.parametrize("domain", ["dt", "ct"])
def test_compression_matches_full(domain):
    rng = np.random.default_rng(5)
    cls, ds = _compression_case(domain, 40, rng)
    full = solve(assemble_local(cls, ds), accuracy="high")
    comp_prog = compress_linear(cls, ds)
    assert comp_prog.count("psd", "rie") <= 2 * 2 + 1 + 2
    comp = solve(comp_prog, accuracy="high")
    assert full.ok and comp.ok
    exact = []
    for sol in (full, comp):
        model, metric = extract_model(sol, cls)
        exact.append(float(local_rie_batch(model, metric, ds, upper=True).sum()))
    # each program's optimizer, evaluated exactly, attains the other's optimum
    assert exact[0] == pytest.approx(exact[1], rel=1e-6)
    assert comp.objective == pytest.approx(exact[1], rel=1e-6)


def test_compression_block_count_large_n():
    rng = np.random.default_rng(8)
    cls, ds = _compression_case("dt", 1000, rng)
    assert compress_linear(cls, ds).count("psd", "rie") <= 7
    cls_aff = linear_class("dt", 2, 1, 2, affine=True, r0=1.0)
    assert compress_linear(cls_aff, ds).count("psd", "rie") <= 8


def test_compression_duplicate_doubles():
    rng = np.random.default_rng(9)
    cls, ds = _compression_case("dt", 30, rng)
    twice = Dataset("dt", np.arange(60), np.vstack([ds.u, ds.u]), np.vstack([ds.y, ds.y]),
                    x=np.vstack([ds.x, ds.x]), v=np.vstack([ds.v, ds.v]))
    a = solve(compress_linear(cls, ds), accuracy="high")
    b = solve(compress_linear(cls, twice), accuracy="high")
    assert b.objective == pytest.approx(2 * a.objective, rel=1e-6)


def test_compression_rejects_nonlinear():
    eb = build_basis(1, 1, x_degree=3, u_degree=0, min_degree=1)
    cls = ModelClass("dt", 1, 1, 1, eb, eb, eb)
    with pytest.raises(ValueError):
        compress_linear(cls, one_sample("dt", 0.0, 0.0, 0.0, 0.0))


def test_solver_independence():
    rng = np.random.default_rng(13)
    cls, ds = _compression_case("dt", 30, rng)
    a = solve(assemble_local(cls, ds), solver="clarabel", accuracy="high")
    b = solve(assemble_local(cls, ds), solver="cvxopt")
    assert a.ok and b.ok
    assert a.objective == pytest.approx(b.objective, rel=1e-5)


# -- equation error -----------------------------------------------------------------------------


def test_equation_error_exact_recovery():
    rng = np.random.default_rng(2)
    lm = random_stable_linear(2, 1, 1, "dt", rng)
    ds = linear_samples(lm, 10, "dt", rng)
    cls = ModelClass.of_model(implicit_linear("dt", np.eye(2), np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)),
                                               np.zeros((1, 1))), fixed=("e",))
    sol = solve(assemble_equation_error(cls, ds), accuracy="high")
    assert sol.objective < 1e-8
    model, _ = extract_model(sol, cls)
    np.testing.assert_allclose(linear_parts(model)[1], lm.A, atol=1e-5)
    np.testing.assert_allclose(linear_parts(model)[2], lm.B, atol=1e-5)


def test_equation_error_finite_fallback():
    # marginal scalar data x+ = 0.999 x: the fallback keeps every sample strictly robust
    x = np.linspace(-1, 1, 15)
    ds = Dataset("dt", np.arange(15), np.zeros((15, 1)), x[:, None], x=x[:, None], v=0.999 * x[:, None])
    cls = linear_class("dt", 1, 1, 1, r0=1.0)
    margin = 1e-3
    sol = solve(assemble_equation_error(cls, ds, FitOptions(margin=margin), finite=True), accuracy="high")
    model, metric = extract_model(sol, cls)
    assert np.all(max_eig_batch(model, metric, ds.x, ds.u, "Rhat") <= -margin * (1 - 1e-4))


def test_empty_and_mismatched_data():
    cls = linear_class("dt", 1, 1, 1)
    with pytest.raises(DataError):
        assemble_local(cls, one_sample("ct", 0.0, 0.0, 0.0, 0.0))
    with pytest.raises(DataError):
        assemble_local(linear_class("dt", 2, 1, 1), one_sample("dt", 0.0, 0.0, 0.0, 0.0))


# -- SOS certificates ------------------------------------------------------------------------------

EB = build_basis(1, 1, x_degree=3, u_degree=0, min_degree=1)  # x, x^2, x^3
LB = build_basis(1, 1, total=1, min_degree=1)  # x, u


def cubic(ec, F, g=0.0, domain="dt"):
    return ImplicitModel(domain, EB, np.array([ec], float), LB, np.array([[F, 0.0]]), LB, np.array([[g, 0.0]]))


def certify(F, margin=1e-6):
    return solve(assemble_stability_certificate(ModelClass.of_model(cubic([1, 0, 1], F)), margin=margin)).status


@pytest.mark.parametrize("ec,r0,ok", [([1, 0, 1], 1.0, True), ([1, 0, -0.1], 0.5, False), ([1, 0.5, 1], 0.5, True),
                                      ([1, 3, 1], 0.5, False)])
def test_global_monotonicity(ec, r0, ok):
    # E(x) = c1 + 2 c2 x + 3 c3 x^2 >= r0 for all x
    cls = ModelClass.of_model(cubic(ec, 0.5))
    prog = ConicProgram()
    dec = declare(prog, cls, MetricMatrix.identity(1))
    add_global_monotonicity(prog, cls, dec, r0)
    xs = np.linspace(-5, 5, 20001)
    grid_ok = bool(np.all(ec[0] + 2 * ec[1] * xs + 3 * ec[2] * xs**2 >= r0))
    assert grid_ok == ok
    assert (solve(prog).status == "optimal") == ok


def test_stability_certificate_bracket():
    # -Rhat = 2(1 + 3x^2) - F^2/P - P >= margin, tightest at x = 0: feasible iff |F| < 1
    assert certify(0.9) == "optimal" and certify(1.1) == "infeasible"
    lo, hi = 0.5, 1.5
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if certify(mid) == "optimal" else (lo, mid)
    xs = np.linspace(-3, 3, 6001)
    Ps = np.linspace(0.05, 3, 2951)

    def grid_ok(F):
        # best metric on the grid, worst state on the grid
        return (F * F / Ps + Ps).min() - 2 * (1 + 3 * xs**2).min() < 0

    grid = [F for F in np.linspace(0.5, 1.5, 1001) if grid_ok(F)]
    assert abs(0.5 * (lo + hi) - max(grid)) <= 0.05 * max(grid)


def test_certificate_linear_single_lmi_and_embedding():
    rng = np.random.default_rng(4)
    lm = random_stable_linear(3, 1, 1, "dt", rng)
    emb = stable_linear_embedding(lm.A, lm.C, "dt")
    mdl = implicit_linear("dt", emb.E, emb.F, emb.E @ lm.B, lm.C, lm.D)
    prog = assemble_stability_certificate(ModelClass.of_model(mdl), MetricMatrix.from_Q(emb.Q))
    assert prog.count("psd") == 1
    assert solve(prog).status == "optimal"


def test_certified_model_negative_on_grid():
    F = 0.8
    cls = ModelClass.of_model(cubic([1, 0, 1], F, g=0.3))
    sol = solve(assemble_stability_certificate(cls, margin=1e-3))
    _, metric = extract_model(sol, cls)
    xs = np.linspace(-3, 3, 601)[:, None]
    eig = max_eig_batch(cubic([1, 0, 1], F, g=0.3), metric, xs, np.zeros_like(xs), "Rhat")
    assert eig.max() <= -1e-3 * (1 - 1e-6)


def test_certificate_degree_rules():
    bad = ImplicitModel("dt", LB.__class__(1, 1, np.array([[1, 0]])), np.array([[1.0]]),
                        build_basis(1, 1, total=2, min_degree=1), np.zeros((1, 5)), LB, np.zeros((1, 2)))
    with pytest.raises(DegreeError):
        assemble_stability_certificate(ModelClass.of_model(bad))


def test_global_program_matches_grid():
    m = cubic([1, 0, 1], 0.8, 1.0)
    cls = ModelClass.of_model(m)
    rng = np.random.default_rng(0)
    N = 3
    X, U, V, Y = (rng.normal(size=(N, 1)) for _ in range(4))
    ds = Dataset("dt", np.arange(N), U, Y, x=X, v=V)
    P = 0.7
    sol = solve(assemble_global(cls, ds, FitOptions(metric=MetricMatrix.from_P([[P]]))), accuracy="high")
    s = sol.value("s").ravel()
    D = np.linspace(-2, 2, 400001)
    e = lambda x: x + x**3
    for i in range(N):
        x0 = X[i, 0]
        de = e(x0 + D) - e(x0)
        dv = 0.8 * (x0 + D) - e(V[i, 0])
        dy = (x0 + D) - Y[i, 0]
        grid = (P * D**2 - 2 * D * de + dv**2 / P + dy**2).max()
        assert s[i] == pytest.approx(grid, abs=1e-4)


def test_global_program_zero_on_exact_data():
    m = cubic([1, 0, 1], 0.5, 1.0)
    cls = ModelClass.of_model(m, fixed=("g",))
    x = np.linspace(-1, 1, 5)
    v = np.array([np.roots([1, 0, 1, -0.5 * xi])[np.abs(np.roots([1, 0, 1, -0.5 * xi]).imag) < 1e-9].real[0] for xi in x])
    ds = Dataset("dt", np.arange(5), np.zeros((5, 1)), x[:, None], x=x[:, None], v=v[:, None])
    sol = solve(assemble_global(cls, ds, FitOptions(r0=0.5, monotone="global-sos")), accuracy="high")
    assert sol.ok and abs(sol.objective) < 1e-5


def test_global_linear_matches_local():
    rng = np.random.default_rng(21)
    cls, ds = _compression_case("dt", 10, rng)
    a = solve(assemble_global(cls, ds), accuracy="high")
    b = solve(assemble_local(cls, ds), accuracy="high")
    assert a.objective == pytest.approx(b.objective, rel=1e-5)


@given(F=st.floats(0.0, 0.95), P=st.floats(0.3, 2.0))
def test_local_fixed_metric_bound_property(F, P):
    cls = fixed_linear("dt", 1.0, F, 0.0, 0.5, 0.0)
    ds = one_sample("dt", -0.1, 0.2, 0.0, 0.1)
    ref = local_rie_upper(cls.to_model({}), MetricMatrix.from_P([[P]]), (ds.v[0], ds.x[0], ds.u[0], ds.y[0]))
    sol = solve(assemble_local(cls, ds, FitOptions(metric=MetricMatrix.from_P([[P]]), monotone="off")), accuracy="high")
    if np.isfinite(ref):
        assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-7)
    else:
        assert sol.status == "infeasible"
