"""Command-line harness: preprocessing, fitting, validation and reproducible experiments.

Exit codes: 0 success, 1 usage error, 2 solver failure, 3 internal error
(including a failed self-check in ``check-linear``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DataError,
    Dataset,
    FilterBankSpec,
    add_laguerre_states,
    drop_warmup,
    dt_pair_states,
    load_csv,
    save_csv,
    spread_subsample,
    to_model_coordinates,
    warmup_duration,
)
from .experiments import (
    ExperimentSpec,
    dt_example_classes,
    dt_example_data,
    linear_samples,
    random_stable_linear,
    synthetic_neuron,
)
from .fit import OBJECTIVES, FitConfig, FitResult, fit
from .model import DegreeError, ModelClass, ModelFormatError, linear_class, linear_parts, load_model, save_model
from .rie import MetricMatrix, local_rie_batch, max_eig_batch
from .sdp import SOLVERS, assemble_local, solve
from .sim import SimulationError, simulated_outputs, simulation_error, verify_bounds, well_posedness_probe

log = logging.getLogger("rieid")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_INTERNAL = 0, 1, 2, 3
MODES = ("per-sample", "global-sos", "off")


class UsageError(Exception):
    pass


class SolverFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if obj is None or isinstance(obj, (str, int, bool)):
        return obj
    return str(obj)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_overlay(path: Path, t: np.ndarray, y_data: np.ndarray, y_model: np.ndarray) -> None:
    k = y_data.shape[1]
    header = ["t"] + [f"y{i + 1}" for i in range(k)] + [f"y{i + 1}_model" for i in range(k)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(t.size):
            vals = [t[i], *y_data[i], *y_model[i]]
            fh.write(",".join("" if not np.isfinite(v) else repr(float(v)) for v in vals) + "\n")


def _out_dir(path: str | None, default: str) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metric_of(doc: dict) -> MetricMatrix | None:
    m = doc.get("metric")
    return MetricMatrix.from_dict(m) if m else None


def _sat(value: float) -> dict:
    """Report entry that never carries an infinity."""
    return {"value": value if math.isfinite(value) else None, "saturated": not math.isfinite(value)}


def config_from_args(args) -> FitConfig:
    try:
        return FitConfig(
            domain=args.domain,
            deg_x=args.deg_x,
            deg_u=args.deg_u,
            deg_e=args.deg_e,
            total_deg_f=args.total_deg_f,
            cross=args.cross,
            affine=not args.no_affine,
            d_x=args.d_x,
            d_u=args.d_u,
            g_mode=args.g_mode,
            objective=args.objective,
            r0=args.r0,
            monotone=args.monotone,
            stability=args.stability,
            margin=args.margin,
            solver=args.solver,
            accuracy=args.accuracy,
            seed=args.seed,
            normalize=not args.no_normalize,
            compress=args.compress,
        )
    except (ValueError, DegreeError) as exc:
        raise UsageError(str(exc)) from None


def _fit_or_fail(ds: Dataset, cfg: FitConfig, cls: ModelClass | None = None) -> FitResult:
    try:
        res = fit(ds, cfg, cls)
    except DegreeError as exc:
        raise UsageError(str(exc)) from None
    if not res.ok:
        raise SolverFailure(f"solver returned {res.solution.status}: {res.solution.diagnostics.get('message', '')}")
    return res


def _save_fit(res: FitResult, out: Path, stem: str) -> None:
    extra = {"metric": res.metric.to_dict()} if res.metric is not None else None
    save_model(res.model, out / f"{stem}.json", extra=extra)
    write_json(out / f"{stem}_report.json", res.report)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    ds = load_csv(args.data, domain=args.domain)
    meta: dict = {"source": str(args.data), "domain": args.domain, "rows_in": ds.N}
    if args.laguerre_pole is not None:
        spec = FilterBankSpec(args.laguerre_pole, args.laguerre_count)
        ds = add_laguerre_states(ds, spec, smoothing=args.smoothing)
        if args.warmup:
            ds = drop_warmup(ds, warmup_duration(spec))
        meta["laguerre"] = {"pole": spec.pole, "count": spec.count, "smoothing": args.smoothing, "warmup": args.warmup}
    if ds.domain == "dt" and ds.x is not None and ds.v is None:
        ds = dt_pair_states(ds)
        meta["paired"] = True
    if args.subsample is not None:
        if args.subsample < 1:
            raise UsageError("--subsample must be positive")
        if ds.x is None:
            raise UsageError("--subsample needs states (add a filter bank or state columns)")
        ds = spread_subsample(ds, args.subsample)
        meta["subsample"] = args.subsample
    meta["rows_out"] = ds.N
    meta["states"] = ds.n
    out = Path(args.out or "preprocessed.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out, meta=meta)
    print(f"wrote {out} ({ds.N} rows, {ds.n} states)")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = config_from_args(args)
    ds = load_csv(args.data, domain=args.domain)
    if ds.x is None or ds.v is None:
        raise UsageError("dataset needs state columns x* and successor/rate columns v* (run preprocess)")
    res = _fit_or_fail(ds, cfg)
    out = _out_dir(args.out, "fit")
    _save_fit(res, out, "model")
    print(f"status {res.solution.status}, objective {res.report['objective']:.6g}; wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    model, doc = load_model(args.model)
    metric = _metric_of(doc)
    ds = load_csv(args.data, domain=args.domain or model.domain)
    if ds.domain != model.domain:
        raise UsageError(f"dataset domain {ds.domain!r} does not match model domain {model.domain!r}")
    if ds.x is None:
        raise UsageError("dataset needs an initial state (x* columns)")
    out = _out_dir(args.out, "validate")
    try:
        traj = simulated_outputs(model, ds)
    except SimulationError as exc:
        traj = None
        log.warning("simulation failed: %s", exc)
    report: dict = {"model": str(args.model), "data": str(args.data)}
    if traj is not None:
        write_overlay(out / "overlay.csv", ds.t, ds.y, traj.y)
        err = simulation_error(model, ds) if traj.finite else math.inf
        report["simulation_error"] = _sat(err)
        report["diverged"] = traj.diverged
        report["diverged_at"] = traj.diverged_at
    else:
        report["simulation_error"] = _sat(math.inf)
        report["diverged"] = True
    if metric is not None and ds.v is not None:
        rep = verify_bounds(model, metric, ds, pairs=args.pairs, seed=args.seed)
        report["bounds"] = rep.to_dict()
        rep.save_json(out / "sim_report.json")
    write_json(out / "validation.json", report)
    flag = "diverged" if report["diverged"] else "finite"
    print(f"trajectory {flag}; report in {out}")
    return EXIT_OK


def run_dt_example(
    spec: ExperimentSpec,
    out: Path,
    total_deg_f: int = 7,
    e_degree: int = 3,
    solver: str | None = None,
    accuracy: str = "default",
) -> dict:
    """Generate data, fit equation-error and local-RIE models, validate both; returns the summary."""
    data = dt_example_data(spec)
    save_csv(data.train, out / "train.csv", meta={"seed": spec.seed, "noise_std": spec.noise_std})
    save_csv(data.test, out / "test.csv", meta={"seed": spec.seed})
    eb, fb, gb, gc = dt_example_classes(total_deg_f, e_degree)
    cls = ModelClass("dt", 2, 1, 2, eb, fb, gb, fixed={"g": gc})
    summary: dict = {"seed": spec.seed, "noise_std": spec.noise_std, "fits": {}}
    for name, objective in (("eqerr", "eqerr"), ("local_rie", "local-rie")):
        cfg = FitConfig(objective=objective, r0=1.0, monotone="global-sos", normalize=False,
                        solver=solver, accuracy=accuracy, seed=spec.seed)
        res = _fit_or_fail(data.train, cfg, cls)
        _save_fit(res, out, f"model_{name}")
        entry: dict = {"objective": res.report["objective"], "status": res.solution.status}
        try:
            traj = simulated_outputs(res.model, data.test)
            err = simulation_error(res.model, data.test) if traj.finite else math.inf
            write_overlay(out / f"overlay_{name}.csv", data.test.t, data.test.y, traj.y)
        except SimulationError as exc:
            traj, err = None, math.inf
            entry["simulation_failure"] = str(exc)
        entry["validation_error"] = _sat(err)
        entry["diverged"] = traj is None or traj.diverged
        if res.metric is not None:
            rhat_samples = float(res.report["robustness"]["max_eig_Rhat"])
            rhat_val = float(max_eig_batch(res.model, res.metric, traj.x, data.test.u).max()) if traj is not None and traj.finite else math.inf
            entry["max_eig_Rhat_samples"] = rhat_samples
            entry["max_eig_Rhat_validation"] = _sat(rhat_val)
            entry["stability_certified"] = bool(rhat_samples <= 0 and math.isfinite(rhat_val) and rhat_val < 0)
        else:
            entry["stability_certified"] = False
        entry["well_posedness_gap"] = well_posedness_probe(res.model, radius=2.0, seed=spec.seed)
        summary["fits"][name] = entry
    e_eq = summary["fits"]["eqerr"]["validation_error"]
    e_rie = summary["fits"]["local_rie"]["validation_error"]
    v_eq = math.inf if e_eq["value"] is None else e_eq["value"]
    v_rie = math.inf if e_rie["value"] is None else e_rie["value"]
    summary["local_rie_better"] = bool(v_rie < v_eq)
    write_json(out / "summary.json", summary)
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("fit,objective,validation_error,diverged,stability_certified\n")
        for name, e in summary["fits"].items():
            ve = e["validation_error"]["value"]
            fh.write(f"{name},{e['objective']!r},{'' if ve is None else repr(ve)},{e['diverged']},{e['stability_certified']}\n")
    return summary


def cmd_repro_dt_example(args) -> int:
    spec = ExperimentSpec(seed=args.seed, noise_std=args.noise_std)
    out = _out_dir(args.out, f"dt_example_seed{args.seed}")
    summary = run_dt_example(spec, out, args.total_deg_f, args.deg_e, args.solver, args.accuracy)
    for name, e in summary["fits"].items():
        ve = e["validation_error"]["value"]
        print(f"{name:10s} validation error {'diverged' if ve is None else f'{ve:.6g}'}  certified={e['stability_certified']}")
    print(f"local-RIE better than equation error: {summary['local_rie_better']}")
    return EXIT_OK


def check_linear(n: int, m: int, k: int, domain: str, seed: int, samples: int | None = None,
                 solver: str | None = None, tol: float = 1e-4) -> dict:
    """Recovery self-check on a random stable system with noise-free samples."""
    rng = np.random.default_rng(seed)
    lm = random_stable_linear(n, m, k, domain, rng)
    N = samples if samples is not None else 4 * (n + m) + 4
    ds = linear_samples(lm, N, domain, rng)
    rank = int(np.linalg.matrix_rank(np.hstack([ds.x, ds.u])))
    cls = linear_class(domain, n, m, k)
    sol = solve(assemble_local(cls, ds), solver=solver, accuracy="high")
    report: dict = {"n": n, "m": m, "k": k, "domain": domain, "seed": seed, "samples": N,
                    "rank": rank, "rank_condition": rank >= n + m, "status": sol.status}
    if not sol.ok:
        raise SolverFailure(f"solver returned {sol.status}")
    from .sdp import extract_model

    model, metric = extract_model(sol, cls)
    E, F, L, G, H, _, _ = linear_parts(model)
    res = lm.recovery_residuals(E, F, L, G, H)
    obj = float(sol.objective)
    upper = local_rie_batch(model, metric, ds, upper=True)
    report.update(objective=obj, recovery=res)
    if rank >= n + m:
        report["pass"] = bool(obj <= 1e-6 and max(res.values()) <= tol)
    else:
        report["pass"] = True
        report["note"] = "rank condition unmet; recovery not asserted"
    # the bound and the local RIE coincide for the linear class at the optimum
    local = local_rie_batch(model, metric, ds)
    gap = float(np.max(np.abs(upper - local))) if np.all(np.isfinite(upper)) else math.inf
    report["bound_gap"] = gap
    return report


def cmd_check_linear(args) -> int:
    rep = check_linear(args.n, args.m, args.k, args.domain, args.seed, args.samples, args.solver)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, rep)
    worst = max(rep["recovery"].values())
    label = "SKIP" if not rep["rank_condition"] else ("PASS" if rep["pass"] else "FAIL")
    print(f"{label}: objective {rep['objective']:.3g}, recovery residual {worst:.3g}, "
          f"rank {rep['rank']} (need {rep['n'] + rep['m']})")
    return EXIT_OK if rep["pass"] else EXIT_INTERNAL


def neuron_pipeline(seed: int, out: Path | None = None, subsample: int = 500, solver: str | None = None,
                    horizon: float = 0.05) -> dict:
    """Synthetic spiking record through filter bank, differentiation, subsampling, CT fit and held-out simulation."""
    raw = synthetic_neuron(seed)
    spec = FilterBankSpec(300.0, 2)
    ds = add_laguerre_states(raw, spec, smoothing=2000.0)
    ds = drop_warmup(ds, warmup_duration(spec))
    half = ds.t[0] + 0.5 * (ds.t[-1] - ds.t[0])
    train = ds.subset(np.nonzero(ds.t < half)[0])
    test = ds.subset(np.nonzero(ds.t >= half)[0])
    sub = spread_subsample(train, subsample)
    cfg = FitConfig(domain="ct", deg_x=4, deg_u=1, deg_e=3, total_deg_f=4, g_mode="select",
                    objective="local-rie", r0=5e-4, monotone="global-sos", solver=solver, seed=seed)
    t0 = time.perf_counter()
    res = _fit_or_fail(sub, cfg)
    elapsed = time.perf_counter() - t0
    model, metric = res.model, res.metric
    # held-out initial conditions: starts spread through the test segment
    rng = np.random.default_rng(seed)
    steps = int(round(horizon / (ds.t[1] - ds.t[0])))
    starts = np.sort(rng.choice(np.arange(0, test.N - steps - 1), size=3, replace=False))
    span = float(np.max(np.abs(train.x - train.x.mean(axis=0))))
    sims = []
    for s in starts:
        seg = test.subset(np.arange(s, s + steps))
        try:
            traj = simulated_outputs(model, seg)
            dev = float(np.nanmax(np.abs(traj.x - train.x.mean(axis=0)))) if traj.finite else math.inf
            err = float(np.sqrt(np.mean((traj.y - seg.y) ** 2))) if traj.finite else math.inf
        except SimulationError:
            dev, err = math.inf, math.inf
        sims.append({"start": float(seg.t[0]), "max_state_deviation": _sat(dev), "rms_output_error": _sat(err),
                     "bounded": bool(math.isfinite(dev) and dev <= 10 * span)})
    work = to_model_coordinates(sub, model.normalization)
    rhat = max_eig_batch(model, metric, work.x, work.u, "Rhat") if metric is not None else np.array([math.inf])
    e_jac = model.e_jac(work.x)[1]
    mono = float(np.linalg.eigvalsh(e_jac + np.swapaxes(e_jac, 1, 2))[:, 0].min())
    summary = {
        "seed": seed,
        "rows": {"raw": raw.N, "after_warmup": ds.N, "train": train.N, "subsample": sub.N, "test": test.N},
        "states": ds.n,
        "fit": {"status": res.solution.status, "objective": res.report["objective"], "seconds": elapsed},
        "max_eig_Rhat_samples": float(rhat.max()),
        "min_eig_EEt_samples": mono,
        "certified": bool(rhat.max() <= 0 and res.model.r0 is not None),
        "simulations": sims,
        "bounded": all(s["bounded"] for s in sims),
    }
    if out is not None:
        _save_fit(res, out, "model")
        save_csv(sub, out / "train_subsample.csv", meta={"seed": seed})
        write_json(out / "summary.json", summary)
    return summary


def cmd_neuron_smoke(args) -> int:
    out = _out_dir(args.out, f"neuron_seed{args.seed}")
    summary = neuron_pipeline(args.seed, out, args.subsample, args.solver)
    print(f"certified={summary['certified']} bounded={summary['bounded']} "
          f"(subsample {summary['rows']['subsample']}, states {summary['states']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--deg-x", type=int, default=1, help="per-state degree of f")
    p.add_argument("--deg-u", type=int, default=1, help="input degree of f")
    p.add_argument("--deg-e", type=int, default=None, help="total degree of e (default: --deg-x)")
    p.add_argument("--total-deg-f", type=int, default=None, help="total-degree cap for f (default: max of --deg-x, --deg-u)")
    p.add_argument("--cross", action="store_true", help="allow state-input products in f")
    p.add_argument("--no-affine", action="store_true", help="drop constant terms from f and g")
    p.add_argument("--d-x", type=int, default=0, help="CT state denominator degree")
    p.add_argument("--d-u", type=int, default=0, help="CT input denominator degree")
    p.add_argument("--g-mode", choices=("linear", "select"), default="linear")
    p.add_argument("--objective", choices=OBJECTIVES, default="local-rie")
    p.add_argument("--r0", type=float, default=None, help="monotonicity margin for E + E' >= 2 r0 I")
    p.add_argument("--monotone", choices=MODES, default="per-sample")
    p.add_argument("--stability", choices=MODES, default="off")
    p.add_argument("--margin", type=float, default=1e-6)
    p.add_argument("--accuracy", choices=("default", "high"), default="default")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--compress", action="store_true", help="compressed program (linear class)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rieid", description="Identification of implicit state-space models by RIE minimization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, domain_default="dt"):
        if data:
            p.add_argument("--data", required=True, help="input CSV")
        p.add_argument("--domain", choices=("dt", "ct"), default=domain_default)
        p.add_argument("--solver", choices=SOLVERS, default=None, help="overrides RIEID_SOLVER")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)

    p = sub.add_parser("preprocess", help="filter bank states, rates, pairing and subsampling")
    common(p)
    p.add_argument("--laguerre-pole", type=float, default=None, help="rad/s")
    p.add_argument("--laguerre-count", type=int, default=2)
    p.add_argument("--smoothing", type=float, default=None, help="low-pass cutoff (rad/s) before differentiation")
    p.add_argument("--warmup", action="store_true", help="drop the filter-bank transient")
    p.add_argument("--subsample", type=int, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="fit a model to preprocessed data")
    common(p)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="simulate a model on data and check the error bounds")
    common(p, domain_default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", type=int, default=0, help="random initial-state pairs for the storage check")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("repro-dt-example", help="second-order DT example: equation error vs local RIE")
    common(p, data=False)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--total-deg-f", type=int, default=7)
    p.add_argument("--deg-e", type=int, default=3)
    p.add_argument("--accuracy", choices=("default", "high"), default="default")
    p.set_defaults(func=cmd_repro_dt_example, seed=42)

    p = sub.add_parser("check-linear", help="recovery self-check on a random stable linear system")
    common(p, data=False)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_check_linear)

    p = sub.add_parser("neuron-smoke", help="synthetic spiking-record pipeline (CT, degree 4)")
    common(p, data=False, domain_default="ct")
    p.add_argument("--subsample", type=int, default=500)
    p.set_defaults(func=cmd_neuron_smoke)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, ModelFormatError, FileNotFoundError, DegreeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except Exception as exc:  # noqa: BLE001  (last-resort exit code)
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
