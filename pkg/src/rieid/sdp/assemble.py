"""Fitting programs: per-sample RIE bounds, equation error, linear compression.

Every block below is the homogenized form of "s >= sup of a concave
quadratic": ``s - c - 2b'D - D'(-R)D >= 0`` for all ``D`` holds exactly when
``[[s - c, -b'], [-b, -R]]`` is PSD, and the Q-weighted squares hidden in
``R, b, c`` are pulled out by a Schur complement against ``diag(P, I)``.
This keeps every entry affine in (coefficients, P, s).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import DataError, Dataset
from ..model import ImplicitModel, ModelClass, component_features
from ..rie import MetricMatrix
from .affine import Affine
from .program import ConicProgram, Solution, SolverError

MONOTONE_MODES = ("per-sample", "global-sos", "off")
STABILITY_MODES = ("per-sample", "global-sos", "off")


@dataclass(frozen=True)
class FitOptions:
    """Constraint choices shared by all fitting programs.

    ``monotone`` places ``E + E' >= 2 r0 I`` at the samples or globally (SOS).
    ``stability`` = "global-sos" adds the global robustness certificate;
    "per-sample" adds finiteness LMIs ``Rhat <= -margin I`` where the
    objective does not already imply them (equation-error fits).
    """

    r0: float | None = None
    monotone: str = "per-sample"
    stability: str = "off"
    metric: MetricMatrix | None = None
    margin: float = 1e-6

    def __post_init__(self):
        if self.monotone not in MONOTONE_MODES:
            raise ValueError(f"monotone must be one of {MONOTONE_MODES}")
        if self.stability not in STABILITY_MODES:
            raise ValueError(f"stability must be one of {STABILITY_MODES}")
        if self.r0 is not None and not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


@dataclass
class Decisions:
    """Affine views of the model coefficients and of ``P``."""

    coef: dict[str, Affine]
    P: Affine


def declare(program: ConicProgram, cls: ModelClass, metric: MetricMatrix | None = None) -> Decisions:
    coef = {}
    for name in "efg":
        T = len(cls.basis(name))
        if name in cls.fixed:
            coef[name] = Affine(cls.fixed[name])
        else:
            coef[name] = program.add_variable(name, (cls.rows(name), T))
    if metric is None:
        P = program.add_variable("P", (cls.n, cls.n), symmetric=True)
    else:
        P = Affine(metric.P)
        program.meta["metric"] = metric
    program.meta["class"] = cls
    return Decisions(coef, P)


# ---------------------------------------------------------------------------
# Per-sample expressions
# ---------------------------------------------------------------------------


@dataclass
class SampleTerms:
    ex: Affine  # (n, 1)
    ey: Affine  # (k, 1)
    E: Affine
    F: Affine
    G: Affine


class _Features:
    """Basis values and Jacobians at every sample, computed once."""

    def __init__(self, cls: ModelClass, ds: Dataset):
        X, U = ds.x, ds.u
        self.phi, self.dphi = {}, {}
        for name in "efg":
            dx, du = cls.denominators(name)
            self.phi[name], self.dphi[name] = component_features(cls.basis(name), X, U, dx, du)
        if cls.domain == "dt":
            self.phi_ev, _ = component_features(cls.e_basis, ds.v, U, 0, 0)
        self.v, self.y = ds.v, ds.y


def sample_terms(cls: ModelClass, dec: Decisions, feat: _Features, i: int) -> SampleTerms:
    C = dec.coef
    E = C["e"] @ feat.dphi["e"][i]
    F = C["f"] @ feat.dphi["f"][i]
    G = C["g"] @ feat.dphi["g"][i]
    fx = C["f"] @ feat.phi["f"][i][:, None]
    if cls.domain == "dt":
        ex = fx - C["e"] @ feat.phi_ev[i][:, None]
    else:
        ex = fx - E @ feat.v[i][:, None]
    ey = C["g"] @ feat.phi["g"][i][:, None] - feat.y[i][:, None]
    return SampleTerms(ex, ey, E, F, G)


def _check_dataset(cls: ModelClass, ds: Dataset) -> None:
    if ds.domain != cls.domain:
        raise DataError(f"dataset domain {ds.domain!r} does not match class domain {cls.domain!r}")
    if ds.N == 0:
        raise DataError("empty dataset")
    ds.require_tuples()
    if (ds.n, ds.m, ds.k) != (cls.n, cls.m, cls.k):
        raise DataError(f"dataset dims {(ds.n, ds.m, ds.k)} do not match class {(cls.n, cls.m, cls.k)}")


def bound_block(domain: str, s, t: SampleTerms, P: Affine, margin: float = 0.0) -> Affine:
    """Schur-lifted PSD block for ``s >= Rhat-bound``; ``s=None`` gives the finiteness block.

    DT: ``[[s, 0, ex', ey'], [0, E+E'-P, F', G'], [ex, F, P, 0], [ey, G, 0, I]]``
    CT: ``[[s, -ex'/2, ex', ey'], [-ex/2, sym(E-F)-P/2, (E+F)', G'], [ex, E+F, 2P, 0], [ey, G, 0, I]]``
    """
    n, k = t.E.shape[0], t.G.shape[0]
    if domain == "dt":
        top = t.E + t.E.T - P
        lift, mid, head = t.F, P, Affine(np.zeros((n, 1)))
    else:
        top = (t.E - t.F).sym() - P * 0.5
        lift, mid, head = t.E + t.F, P * 2.0, t.ex * -0.5
    if margin:
        top = top - margin * np.eye(n)
    core = [[top, lift.T, t.G.T], [lift, mid, None], [t.G, None, np.eye(k)]]
    col0 = [head, t.ex, t.ey]
    first = [s, head.T, t.ex.T, t.ey.T]
    if k == 0:
        core = [row[:2] for row in core[:2]]
        col0, first = col0[:2], first[:3]
    if s is None:
        return Affine.bmat(core)
    return Affine.bmat([first] + [[c] + row for c, row in zip(col0, core)])


def _monotone_blocks(program, cls: ModelClass, dec: Decisions, feat: _Features | None, N: int, r0: float, mode: str):
    if mode == "off":
        return
    if mode == "global-sos" or cls.e_basis.degree <= 1 and not cls.d_x:
        from .sos import add_global_monotonicity

        add_global_monotonicity(program, cls, dec, r0)
        return
    n = cls.n
    for i in range(N):
        E = dec.coef["e"] @ feat.dphi["e"][i]
        program.add_psd(E + E.T - 2 * r0 * np.eye(n), "monotone")


def _resolve_r0(cls: ModelClass, opts: FitOptions) -> float | None:
    return opts.r0 if opts.r0 is not None else cls.r0


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------


def assemble_local(cls: ModelClass, ds: Dataset, opts: FitOptions = FitOptions()) -> ConicProgram:
    """Minimize the sum over samples of the convex local-RIE upper bound."""
    _check_dataset(cls, ds)
    cls.check_degrees(opts.stability)
    prog = ConicProgram()
    dec = declare(prog, cls, opts.metric)
    s = prog.add_variable("s", (ds.N, 1))
    feat = _Features(cls, ds)
    for i in range(ds.N):
        prog.add_psd(bound_block(cls.domain, s[i : i + 1, :], sample_terms(cls, dec, feat, i), dec.P), "rie")
    r0 = _resolve_r0(cls, opts)
    if r0 is not None:
        _monotone_blocks(prog, cls, dec, feat, ds.N, r0, opts.monotone)
    if opts.stability == "global-sos":
        from .sos import add_stability_certificate

        add_stability_certificate(prog, cls, dec, opts.margin)
    prog.minimize(Affine(np.ones((1, ds.N))) @ s)
    prog.meta.update(kind="local", decisions=dec, r0=r0 if opts.monotone != "off" else None, domain=cls.domain)
    return prog


def assemble_equation_error(cls: ModelClass, ds: Dataset, opts: FitOptions = FitOptions(), finite: bool = False) -> ConicProgram:
    """Minimize the summed squared equation errors (rotated second-order cone).

    ``finite`` adds ``Rhat <= -margin I`` at every sample, with a free ``P``
    unless a metric is fixed in ``opts``.
    """
    _check_dataset(cls, ds)
    cls.check_degrees(opts.stability)
    prog = ConicProgram()
    dec = declare(prog, cls, opts.metric) if finite or opts.stability == "global-sos" else None
    if dec is None:
        coef = {}
        for name in "efg":
            coef[name] = Affine(cls.fixed[name]) if name in cls.fixed else prog.add_variable(name, (cls.rows(name), len(cls.basis(name))))
        dec = Decisions(coef, Affine(np.eye(cls.n)))
        prog.meta["class"] = cls
    feat = _Features(cls, ds)
    terms = [sample_terms(cls, dec, feat, i) for i in range(ds.N)]
    resid = Affine.vstack([t.ex for t in terms] + ([t.ey for t in terms] if cls.k else []))
    tvar = prog.add_variable("t", (1, 1))
    # |r|^2 <= t  <=>  |[2r; t-1]| <= t+1
    prog.add_soc(tvar + 1.0, Affine.vstack([resid * 2.0, tvar - 1.0]), "eqerr")
    if finite:
        for t in terms:
            prog.add_psd(bound_block(cls.domain, None, t, dec.P, opts.margin), "finite")
    r0 = _resolve_r0(cls, opts)
    if r0 is not None:
        _monotone_blocks(prog, cls, dec, feat, ds.N, r0, opts.monotone)
    if opts.stability == "global-sos":
        from .sos import add_stability_certificate

        add_stability_certificate(prog, cls, dec, opts.margin)
    prog.minimize(tvar)
    prog.meta.update(kind="eqerr", decisions=dec, r0=r0 if opts.monotone != "off" else None, domain=cls.domain, finite=finite)
    return prog


# ---------------------------------------------------------------------------
# Linear-class compression
# ---------------------------------------------------------------------------


def _selection(basis, source: str, n: int, m: int, k: int, has_const: bool) -> np.ndarray:
    """Map a linear basis to the stacked data vector ``[v; x; u; y; 1]``."""
    dim = 2 * n + m + k + (1 if has_const else 0)
    S = np.zeros((len(basis), dim))
    for t, e in enumerate(basis.exps):
        if e.sum() == 0:
            if not has_const:
                raise ValueError("constant basis term requires the affine data vector")
            S[t, -1] = 1.0
            continue
        i = int(np.argmax(e))
        if i < n:
            S[t, (0 if source == "v" else n) + i] = 1.0
        else:
            S[t, 2 * n + (i - n)] = 1.0
    return S


def _jacobian_selection(basis, n: int) -> np.ndarray:
    D = np.zeros((len(basis), n))
    for t, e in enumerate(basis.exps):
        if e.sum() == 1 and np.argmax(e) < n:
            D[t, int(np.argmax(e))] = 1.0
    return D


def stacked_data(ds: Dataset, affine: bool) -> np.ndarray:
    parts = [ds.v, ds.x, ds.u, ds.y] + ([np.ones((ds.N, 1))] if affine else [])
    return np.hstack(parts)


def error_map(cls: ModelClass, dec: Decisions, affine: bool) -> Affine:
    """Affine matrix ``Theta`` with ``w = Theta @ zeta`` for the linear class.

    ``w = [0; ex; ey]`` (DT) or ``[-ex/2; ex; ey]`` (CT).
    """
    n, m, k = cls.n, cls.m, cls.k
    C = dec.coef
    Sf = _selection(cls.f_basis, "x", n, m, k, affine)
    Sg = _selection(cls.g_basis, "x", n, m, k, affine)
    dim = Sf.shape[1]
    Sy = np.zeros((k, dim))
    Sy[:, 2 * n + m : 2 * n + m + k] = np.eye(k)
    if cls.domain == "dt":
        Se = _selection(cls.e_basis, "v", n, m, k, affine)
        ex = C["f"] @ Sf - C["e"] @ Se
        head = Affine(np.zeros((n, dim)))
    else:
        Sv = np.zeros((n, dim))
        Sv[:, :n] = np.eye(n)
        ex = C["f"] @ Sf - C["e"] @ (_jacobian_selection(cls.e_basis, n) @ Sv)
        head = ex * -0.5
    ey = C["g"] @ Sg - Sy
    return Affine.vstack([head, ex, ey])


def compress_linear(cls: ModelClass, ds: Dataset, opts: FitOptions = FitOptions(), cutoff: float = 1e-12) -> ConicProgram:
    """Local-RIE program for a linear/affine class with at most dim(zeta) LMIs.

    Uses ``sum_i w_i' H^-1 w_i = trace(H^-1 Theta C Theta')`` with the data
    second moment ``C = sum_i zeta_i zeta_i'`` and one Schur block per
    retained eigenpair of ``C``.
    """
    _check_dataset(cls, ds)
    if not cls.is_linear():
        raise ValueError("compression applies to linear/affine classes only")
    affine = any((cls.basis(c).exps.sum(axis=1) == 0).any() for c in "efg")
    prog = ConicProgram()
    dec = declare(prog, cls, opts.metric)
    Z = stacked_data(ds, affine)
    mu, V = np.linalg.eigh(Z.T @ Z)
    keep = mu >= cutoff * max(mu.max(), 1e-300)
    mu, V = mu[keep], V[:, keep]
    Theta = error_map(cls, dec, affine)
    n = cls.n
    E = dec.coef["e"] @ _jacobian_selection(cls.e_basis, n)
    F = dec.coef["f"] @ _jacobian_selection(cls.f_basis, n)
    G = dec.coef["g"] @ _jacobian_selection(cls.g_basis, n)
    tv = prog.add_variable("s", (len(mu), 1))
    for j in range(len(mu)):
        w = Theta @ (np.sqrt(mu[j]) * V[:, [j]])
        core = SampleTerms(w[n : 2 * n, :], w[2 * n :, :], E, F, G)
        prog.add_psd(bound_block(cls.domain, tv[j : j + 1, :], core, dec.P), "rie")
    r0 = _resolve_r0(cls, opts)
    if r0 is not None and opts.monotone != "off":
        prog.add_psd(E + E.T - 2 * r0 * np.eye(n), "monotone")
    prog.minimize(Affine(np.ones((1, len(mu)))) @ tv)
    prog.meta.update(kind="compressed", decisions=dec, r0=r0, domain=cls.domain, eigenvalues=mu)
    return prog


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def extract_model(solution: Solution, cls: ModelClass, normalization=None) -> tuple[ImplicitModel, MetricMatrix | None]:
    """Read coefficients (and ``P``) back from a solution."""
    if not solution.ok:
        raise SolverError(solution)
    coefs = {name: solution.value(name) for name in "efg" if name in solution.catalog}
    model = cls.to_model(coefs, normalization)
    r0 = solution.meta.get("r0")
    if r0 is not None and model.r0 is None:
        model = model.with_(r0=float(r0))
    if "P" in solution.catalog:
        P = solution.value("P")
        metric = MetricMatrix.from_P(0.5 * (P + P.T))
    else:
        metric = solution.meta.get("metric")
    return model, metric
