import csv
import json

import numpy as np
import pytest

from rieid import cli
from rieid.data import DataError, Dataset, load_csv, save_csv
from rieid.experiments import linear_trajectory, random_stable_linear
from rieid.fit import FitConfig, build_class, fit
from rieid.model import DegreeError, implicit_linear, linear_parts, save_model
from rieid.rie import MetricMatrix, stable_linear_embedding
from rieid.sdp import Solution


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(c) if c else np.nan for c in r] for r in rows[1:]])


@pytest.fixture
def linear_csv(tmp_path):
    rng = np.random.default_rng(3)
    lm = random_stable_linear(2, 1, 1, "dt", rng)
    ds = linear_trajectory(lm, 40, rng)
    path = tmp_path / "lin.csv"
    save_csv(ds, path)
    return path, lm, ds


# -- FitConfig and fit --------------------------------------------------------------------


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(domain="xt")
    with pytest.raises(ValueError):
        FitConfig(objective="eqerr", compress=True)
    with pytest.raises(DegreeError):
        FitConfig(domain="dt", d_x=1)
    with pytest.raises(ValueError):
        FitConfig(r0=-1.0)
    with pytest.raises(ValueError):
        FitConfig(stability="sometimes")


def test_build_class_select_output():
    cls = build_class(FitConfig(g_mode="select"), 3, 1, 2)
    assert "g" in cls.fixed and cls.fixed["g"].shape == (2, len(cls.g_basis))
    with pytest.raises(DataError):
        build_class(FitConfig(g_mode="select"), 1, 1, 2)


def test_fit_recovers_linear_system(linear_csv):
    _, lm, ds = linear_csv
    res = fit(ds, FitConfig(r0=1.0, affine=False, normalize=False, solver="cvxopt", accuracy="high"))
    assert res.ok and abs(res.report["objective"]) <= 1e-6
    E, F, L, G, H, _, _ = linear_parts(res.model)
    assert max(lm.recovery_residuals(E, F, L, G, H).values()) <= 1e-4
    assert len(res.report["robustness"]["per_sample"]) == ds.N


@pytest.mark.parametrize("objective", ["eqerr", "eqerr+rie-finite", "global-rie"])
def test_fit_objectives_run(linear_csv, objective):
    _, _, ds = linear_csv
    noisy = Dataset("dt", ds.t, ds.u, ds.y + 0.01, x=ds.x, v=ds.v)
    res = fit(noisy, FitConfig(objective=objective, r0=1.0))
    assert res.ok and res.model is not None


def test_fit_domain_mismatch(linear_csv):
    _, _, ds = linear_csv
    with pytest.raises(DataError):
        fit(ds, FitConfig(domain="ct"))


def test_compressed_fit_matches(linear_csv):
    _, _, ds = linear_csv
    noisy = Dataset("dt", ds.t, ds.u, ds.y + 0.05 * np.sin(ds.t)[:, None], x=ds.x, v=ds.v)
    a = fit(noisy, FitConfig(r0=1.0, affine=False, accuracy="high"))
    b = fit(noisy, FitConfig(r0=1.0, affine=False, accuracy="high", compress=True))
    assert a.report["objective"] == pytest.approx(b.report["objective"], rel=1e-5)


# -- check-linear ---------------------------------------------------------------------------------


def test_check_linear_examples():
    dt = cli.check_linear(3, 1, 1, "dt", seed=7)
    assert dt["pass"] and dt["rank_condition"]
    ct = cli.check_linear(2, 1, 1, "ct", seed=0)
    assert ct["pass"]
    short = cli.check_linear(3, 1, 1, "dt", seed=7, samples=3)
    assert not short["rank_condition"]


def test_check_linear_cli(capsys):
    assert cli.main(["check-linear", "--n", "2", "--seed", "7"]) == 0
    assert capsys.readouterr().out.startswith("PASS")
    assert cli.main(["check-linear", "--n", "3", "--samples", "3"]) == 0
    assert capsys.readouterr().out.startswith("SKIP")


# -- exit codes -------------------------------------------------------------------------------------


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["bogus"]) == 1
    assert cli.main(["fit"]) == 1  # --data missing
    assert cli.main(["fit", "--data", str(tmp_path / "missing.csv")]) == 1
    assert cli.main(["--help"]) == 0
    empty = tmp_path / "empty.csv"
    empty.write_text("t,u1,y1,x1,v1\n")
    assert cli.main(["fit", "--data", str(empty)]) == 1
    bare = tmp_path / "bare.csv"
    bare.write_text("t,u1,y1\n0,1,2\n1,2,3\n")
    assert cli.main(["fit", "--data", str(bare)]) == 1
    capsys.readouterr()


def test_illegal_degrees_are_usage_errors(linear_csv, tmp_path):
    path, _, _ = linear_csv
    code = cli.main(["fit", "--data", str(path), "--deg-x", "3", "--deg-e", "1", "--stability", "global-sos",
                     "--r0", "1", "--out", str(tmp_path / "f")])
    assert code == 1


def test_solver_failure_exit_code(linear_csv, tmp_path, monkeypatch):
    path, _, _ = linear_csv
    monkeypatch.setattr("rieid.fit.solve", lambda *a, **k: Solution("infeasible", None, None, {"message": "forced"}))
    assert cli.main(["fit", "--data", str(path), "--out", str(tmp_path / "f")]) == 2


def test_internal_error_exit_code(linear_csv, tmp_path, monkeypatch):
    path, _, _ = linear_csv

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr("rieid.cli.fit", boom)
    assert cli.main(["fit", "--data", str(path), "--out", str(tmp_path / "f")]) == 3


# -- fit and validate -------------------------------------------------------------------------------


def test_fit_then_validate(linear_csv, tmp_path):
    path, _, _ = linear_csv
    out = tmp_path / "fit"
    assert cli.main(["fit", "--data", str(path), "--r0", "1", "--out", str(out)]) == 0
    report = json.loads((out / "model_report.json").read_text())
    assert report["status"] == "optimal" and "robustness" in report
    val = tmp_path / "val"
    assert cli.main(["validate", "--model", str(out / "model.json"), "--data", str(path), "--pairs", "3",
                     "--out", str(val)]) == 0
    doc = json.loads((val / "validation.json").read_text())
    assert doc["diverged"] is False
    assert (val / "overlay.csv").exists() and (val / "sim_report.json").exists()


def test_validate_exact_model_overlay(linear_csv, tmp_path):
    path, lm, _ = linear_csv
    emb = stable_linear_embedding(lm.A, lm.C, "dt")
    mdl = implicit_linear("dt", emb.E, emb.F, emb.E @ lm.B, lm.C, lm.D)
    save_model(mdl, tmp_path / "m.json", extra={"metric": MetricMatrix.from_Q(emb.Q).to_dict()})
    assert cli.main(["validate", "--model", str(tmp_path / "m.json"), "--data", str(path), "--pairs", "4",
                     "--out", str(tmp_path / "v")]) == 0
    header, table = read_table(tmp_path / "v" / "overlay.csv")
    assert header == ["t", "y1", "y1_model"]
    assert np.max(np.abs(table[:, 1] - table[:, 2])) <= 1e-8
    rep = json.loads((tmp_path / "v" / "sim_report.json").read_text())
    assert all(r["status"] == "pass" for r in rep["ledger"])


def test_validate_diverging_model_exit_zero(linear_csv, tmp_path):
    path, _, _ = linear_csv
    bad = implicit_linear("dt", np.eye(2), 3.0 * np.eye(2), np.zeros((2, 1)), np.ones((1, 2)), np.zeros((1, 1)))
    save_model(bad, tmp_path / "bad.json", extra={"metric": MetricMatrix.identity(2).to_dict()})
    assert cli.main(["validate", "--model", str(tmp_path / "bad.json"), "--data", str(path), "--pairs", "2",
                     "--out", str(tmp_path / "v")]) == 0
    doc = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert doc["diverged"] is True and doc["simulation_error"]["saturated"] is True
    statuses = {r["name"]: r["status"] for r in doc["bounds"]["ledger"]}
    assert statuses["dissipation"] == "fail"


def test_validate_domain_mismatch(linear_csv, tmp_path):
    path, _, _ = linear_csv
    mdl = implicit_linear("ct", np.eye(2), -np.eye(2), np.zeros((2, 1)), np.ones((1, 2)), np.zeros((1, 1)))
    save_model(mdl, tmp_path / "ct.json")
    assert cli.main(["validate", "--model", str(tmp_path / "ct.json"), "--data", str(path), "--domain", "dt",
                     "--out", str(tmp_path / "v")]) == 1


# -- preprocess -------------------------------------------------------------------------------------


@pytest.fixture
def raw_ct_csv(tmp_path):
    t = np.arange(0, 0.3, 1e-4)
    u = np.sin(2 * np.pi * 20 * t) + 0.5 * np.sin(2 * np.pi * 55 * t)
    y = np.sin(2 * np.pi * 20 * t - 0.3)
    path = tmp_path / "raw.csv"
    save_csv(Dataset("ct", t, u, y), path)
    return path


def test_preprocess_laguerre_states(raw_ct_csv, tmp_path):
    out = tmp_path / "pre.csv"
    args = ["preprocess", "--data", str(raw_ct_csv), "--domain", "ct", "--laguerre-pole", "300",
            "--laguerre-count", "2", "--smoothing", "2000", "--warmup", "--subsample", "200", "--out", str(out)]
    assert cli.main(args) == 0
    ds = load_csv(out, domain="ct")
    assert ds.n == 3 and ds.N <= 200 and ds.v is not None
    meta = json.loads(out.with_name(out.name + ".meta.json").read_text())
    assert meta["states"] == 3
    # deterministic output
    out2 = tmp_path / "pre2.csv"
    assert cli.main(args[:-1] + [str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_preprocess_dt_pairing(tmp_path):
    path = tmp_path / "dt.csv"
    path.write_text("t,u1,y1,x1,x2\n1,0.1,1,1,2\n2,0.2,2,3,4\n3,0.3,3,5,6\n")
    out = tmp_path / "paired.csv"
    assert cli.main(["preprocess", "--data", str(path), "--out", str(out)]) == 0
    ds = load_csv(out)
    assert ds.N == 2
    np.testing.assert_array_equal(ds.v, [[3, 4], [5, 6]])


def test_preprocess_bad_subsample(raw_ct_csv, tmp_path):
    assert cli.main(["preprocess", "--data", str(raw_ct_csv), "--domain", "ct", "--subsample", "10",
                     "--out", str(tmp_path / "x.csv")]) == 1


# -- experiment reproduction ---------------------------------------------------------------------------


def test_repro_small_class_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["repro-dt-example", "--seed", "3", "--total-deg-f", "3", "--out", str(out)]) == 0
        runs.append(out)
    for f in ("summary.csv", "overlay_local_rie.csv", "overlay_eqerr.csv", "train.csv", "test.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    summary = json.loads((runs[0] / "summary.json").read_text())
    assert "local_rie" in json.dumps(summary)
