"""Sum-of-squares constraints for polynomial matrix inequalities.

A polynomial matrix ``M(w)`` is certified PSD for all ``w`` by scalarizing
with a multiplier vector ``lam`` and asking ``lam' M(w) lam`` to be a sum of
squares. Forms here are quadratic in the multipliers, so the Gram basis is
``{lam_i * w^a}`` with a per-multiplier degree read off the diagonal terms.
A "dehomogenized" form uses the constant 1 as an extra multiplier, which is
how the per-sample global-RIE bound ``s - ... >= 0`` is encoded.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from ..data import Dataset
from ..model import DegreeError, ModelClass, denominator_poly
from ..poly import Poly, embed, shifted_monomial
from .affine import Affine
from .assemble import Decisions, FitOptions, _check_dataset, _resolve_r0, declare
from .program import ConicProgram


class PolyExpr:
    """Polynomial whose coefficients are affine in the decisions."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: dict | None = None):
        self.nvars = nvars
        self.terms: dict[tuple, Affine] = dict(terms or {})

    @classmethod
    def from_poly(cls, p: Poly, coef: Affine | float = 1.0) -> "PolyExpr":
        out = cls(p.nvars)
        for mono, c in p.terms.items():
            out.terms[mono] = coef * c if isinstance(coef, Affine) else Affine(np.array([[float(coef) * c]]))
        return out

    def __add__(self, other: "PolyExpr") -> "PolyExpr":
        out = PolyExpr(self.nvars, self.terms)
        for mono, a in other.terms.items():
            out.terms[mono] = out.terms[mono] + a if mono in out.terms else a
        return out

    def __neg__(self) -> "PolyExpr":
        return PolyExpr(self.nvars, {m: -a for m, a in self.terms.items()})

    def __sub__(self, other: "PolyExpr") -> "PolyExpr":
        return self + (-other)

    def scale(self, c: float) -> "PolyExpr":
        return PolyExpr(self.nvars, {m: a * c for m, a in self.terms.items()})

    def times(self, p: Poly) -> "PolyExpr":
        """Product with a numeric polynomial."""
        acc: dict[tuple, list] = defaultdict(list)
        for m1, a in self.terms.items():
            for m2, c in p.terms.items():
                acc[tuple(x + y for x, y in zip(m1, m2))].append(a * c)
        return PolyExpr(self.nvars, {m: Affine.sum(v) for m, v in acc.items()})

    def support(self) -> list[tuple]:
        return [m for m, a in self.terms.items() if a.coef.nnz or np.any(a.const != 0)]

    def value(self, x: np.ndarray, z: np.ndarray) -> float:
        return float(sum(a.value(x)[0, 0] * np.prod(np.asarray(z) ** np.array(m)) for m, a in self.terms.items()))


def combine(items: Iterable[tuple[Affine | float, Poly]], nvars: int) -> PolyExpr:
    """``sum_t a_t * p_t`` for affine scalars ``a_t`` and numeric polynomials ``p_t``."""
    acc: dict[tuple, list] = defaultdict(list)
    for a, p in items:
        for mono, c in p.terms.items():
            acc[mono].append(a * c if isinstance(a, Affine) else Affine(np.array([[float(a) * c]])))
    return PolyExpr(nvars, {m: Affine.sum(v) for m, v in acc.items()})


def _monomials(nfree: int, cap_total: int, caps: Sequence[int]) -> list[tuple]:
    out = []
    for e in itertools.product(*[range(c + 1) for c in caps]):
        if sum(e) <= cap_total:
            out.append(e)
    out.sort(key=lambda e: (sum(e), tuple(-a for a in e)))
    return out


def gram_basis(support: Sequence[tuple], nfree: int, nmult: int, dehomogenized: bool) -> list[tuple]:
    """Gram basis for a form quadratic in the multipliers.

    Returns monomials over (free vars, multipliers); the homogenizing
    multiplier of a dehomogenized form is represented by the absence of
    any multiplier.
    """
    groups = list(range(nmult)) + ([-1] if dehomogenized else [])

    def group_of(mono):
        lam = mono[nfree:]
        d = sum(lam)
        if d == 2:
            idx = [i for i, a in enumerate(lam) if a]
            return (idx[0], idx[-1])
        if d == 1:
            return (-1, int(np.argmax(lam)))
        if d == 0:
            return (-1, -1)
        raise DegreeError("form is not quadratic in the multipliers")

    diag_deg: dict[int, list[tuple]] = defaultdict(list)
    for mono in support:
        i, j = group_of(mono)
        if i == j:
            diag_deg[i].append(mono[:nfree])
    basis = []
    for g in groups:
        if g not in diag_deg:
            continue
        frees = diag_deg[g]
        total = max(sum(f) for f in frees) // 2
        caps = [max(f[v] for f in frees) // 2 for v in range(nfree)]
        for e in _monomials(nfree, total, caps):
            lam = [0] * nmult
            if g >= 0:
                lam[g] = 1
            basis.append(tuple(e) + tuple(lam))
    # iteratively drop elements whose square cannot be matched
    supp = set(support)
    while True:
        prods = defaultdict(int)
        for a, b in itertools.combinations(basis, 2):
            prods[tuple(x + y for x, y in zip(a, b))] += 1
        keep = [b for b in basis if tuple(2 * x for x in b) in supp or prods[tuple(2 * x for x in b)]]
        if len(keep) == len(basis):
            break
        basis = keep
    products = {tuple(x + y for x, y in zip(a, b)) for a in basis for b in basis}
    missing = [m for m in support if m not in products]
    if missing:
        raise DegreeError(f"SOS basis cannot match {len(missing)} monomial(s), e.g. {missing[0]}; degree rules violated")
    return basis


def add_sos(program: ConicProgram, p: PolyExpr, nfree: int, nmult: int, dehomogenized: bool = False, label: str = "sos") -> int:
    """Require ``p`` to be SOS; returns the Gram size."""
    support = p.support()
    if not support:
        return 0
    basis = gram_basis(support, nfree, nmult, dehomogenized)
    L = len(basis)
    name = f"gram{sum(1 for k in program.catalog if k.startswith('gram'))}"
    Gm = program.add_variable(name, (L, L), symmetric=True)
    program.add_psd(Gm, label)
    info = program.catalog[name]
    tri = np.zeros((L, L), dtype=int)
    tri[np.triu_indices(L)] = np.arange(L * (L + 1) // 2)
    rows_of: dict[tuple, int] = {}
    r_idx, c_idx, vals = [], [], []
    for i in range(L):
        for j in range(i, L):
            mono = tuple(x + y for x, y in zip(basis[i], basis[j]))
            r = rows_of.setdefault(mono, len(rows_of))
            r_idx.append(r)
            c_idx.append(info.start + tri[i, j])
            vals.append(1.0 if i == j else 2.0)
    M = len(rows_of)
    gram_side = Affine(np.zeros((M, 1)), sp.csr_matrix((vals, (r_idx, c_idx)), shape=(M, program.nvars)))
    monos = sorted(rows_of, key=rows_of.get)
    poly_side = Affine.vstack([p.terms[m] if m in p.terms else Affine(np.zeros((1, 1))) for m in monos])
    program.add_eq(gram_side - poly_side, label + "-match")
    return L


# ---------------------------------------------------------------------------
# Polynomial Jacobians of model components
# ---------------------------------------------------------------------------


def cleared_jacobian(cls: ModelClass, name: str) -> tuple[list[list[Poly]], Poly]:
    """Numerators ``N[t][j]`` with ``d(phi_t / den)/dx_j = N[t][j] / D``.

    Polynomials live in the (x, u) space; ``D = q^2 p`` (or 1 without
    denominators), with ``p`` present only for components that carry it.
    """
    n, m = cls.n, cls.m
    nv = n + m
    dx, du = cls.denominators(name)
    q = denominator_poly(nv, range(n), dx)
    pu = denominator_poly(nv, range(n, nv), du)
    N = []
    for poly in cls.basis(name).polys():
        if dx:
            N.append([q * poly.deriv(j) - poly * q.deriv(j) for j in range(n)])
        else:
            N.append([poly.deriv(j) for j in range(n)])
    D = (q * q if dx else Poly.constant(nv, 1.0)) * pu
    return N, D


def jacobian_exprs(C: Affine, N: list[list[Poly]], rows: int, n: int, nvars: int, positions) -> list[list[PolyExpr]]:
    """Entries ``sum_t C[i,t] N[t][j]`` embedded into the indeterminate space."""
    out = []
    for i in range(rows):
        row = []
        for j in range(n):
            items = [(C[i : i + 1, t : t + 1], embed(N[t][j], nvars, positions)) for t in range(len(N)) if not N[t][j].is_zero()]
            row.append(combine(items, nvars) if items else PolyExpr(nvars))
        out.append(row)
    return out


def _lam(nvars: int, i: int) -> Poly:
    return Poly.variable(nvars, i)


def quad_form(M: list[list[PolyExpr]], left: Sequence[int], right: Sequence[int], nvars: int, weight: float = 1.0) -> PolyExpr:
    """``weight * sum_ij left_i right_j M_ij`` with indeterminate indices ``left``, ``right``."""
    out = PolyExpr(nvars)
    for i, li in enumerate(left):
        for j, rj in enumerate(right):
            if M[i][j].terms:
                out = out + M[i][j].times(_lam(nvars, li) * _lam(nvars, rj)).scale(weight)
    return out


def const_quad_form(A: Affine, left: Sequence[int], right: Sequence[int], nvars: int, weight: float = 1.0, scale_poly: Poly | None = None) -> PolyExpr:
    """``weight * left' A right`` for an affine (non-polynomial) matrix ``A``."""
    items = []
    for i, li in enumerate(left):
        for j, rj in enumerate(right):
            mono = _lam(nvars, li) * _lam(nvars, rj)
            if scale_poly is not None:
                mono = mono * scale_poly
            items.append((A[i : i + 1, j : j + 1] * weight, mono))
    return combine(items, nvars)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------


def add_global_monotonicity(program: ConicProgram, cls: ModelClass, dec: Decisions, r0: float) -> None:
    """``E(x) + E(x)' >= 2 r0 I`` for all ``x`` (after clearing ``q^2``)."""
    n = cls.n
    if cls.e_basis.degree <= 1 and not cls.d_x:
        from .assemble import _jacobian_selection

        E = dec.coef["e"] @ _jacobian_selection(cls.e_basis, n)
        program.add_psd(E + E.T - 2 * r0 * np.eye(n), "monotone")
        return
    nv = 2 * n  # (x, a)
    lam = list(range(n, 2 * n))
    N, D = cleared_jacobian(cls, "e")
    E = jacobian_exprs(dec.coef["e"], N, n, n, nv, _xu_positions(n, cls.m, nv))
    sym = [[E[i][j] + E[j][i] for j in range(n)] for i in range(n)]
    form = quad_form(sym, lam, lam, nv)
    Dx = embed(D, nv, _xu_positions(n, cls.m, nv))
    penalty = Poly(nv)
    for i in lam:
        penalty = penalty + _lam(nv, i) * _lam(nv, i)
    form = form - PolyExpr.from_poly(Dx * penalty, 2.0 * r0)
    add_sos(program, form, nfree=n, nmult=n, label="monotone-sos")


def _xu_positions(n: int, m: int, nv: int) -> list[int]:
    # u coordinates never appear in e; map them to x slots harmlessly
    return list(range(n)) + [0] * m


def add_stability_certificate(program: ConicProgram, cls: ModelClass, dec: Decisions, margin: float = 1e-6) -> None:
    """Certify ``-Rhat(x, u) >= margin I`` for all (x, u) via its Schur lift.

    DT: ``[[E+E'-P-mI, F', G'], [F, P, 0], [G, 0, I]] >= 0``.
    CT: ``[[sym(E-F)-P/2-mI, (E+F)', G'], [E+F, 2P, 0], [G, 0, I]] >= 0``,
    multiplied through by ``diag(q^2 p I, I, I)``; the margin then applies
    to the cleared matrix.
    """
    n, m, k = cls.n, cls.m, cls.k
    P = dec.P
    if cls.is_linear():
        from .assemble import SampleTerms, _jacobian_selection, bound_block

        E = dec.coef["e"] @ _jacobian_selection(cls.e_basis, n)
        F = dec.coef["f"] @ _jacobian_selection(cls.f_basis, n)
        G = dec.coef["g"] @ _jacobian_selection(cls.g_basis, n)
        t = SampleTerms(Affine(np.zeros((n, 1))), Affine(np.zeros((k, 1))), E, F, G)
        program.add_psd(bound_block(cls.domain, None, t, P, margin), "stability")
        return
    # indeterminates: x (n), u (m), a (n), b (n), c (k)
    nv = 2 * n + m + n + k
    xu = list(range(n + m))
    a = list(range(n + m, 2 * n + m))
    b = list(range(2 * n + m, 3 * n + m))
    c = list(range(3 * n + m, 3 * n + m + k))
    Ne, De = cleared_jacobian(cls, "e")
    Nf, Df = cleared_jacobian(cls, "f")
    Ng, _ = cleared_jacobian(cls, "g")
    E = jacobian_exprs(dec.coef["e"], Ne, n, n, nv, xu)
    F = jacobian_exprs(dec.coef["f"], Nf, n, n, nv, xu)
    G = jacobian_exprs(dec.coef["g"], Ng, k, n, nv, xu)
    if cls.domain == "dt":
        top = [[E[i][j] + E[j][i] for j in range(n)] for i in range(n)]
        form = quad_form(top, a, a, nv)
        form = form - const_quad_form(P, a, a, nv)
        form = form + quad_form(F, b, a, nv, 2.0) + quad_form(G, c, a, nv, 2.0)
        form = form + const_quad_form(P, b, b, nv)
    else:
        # cleared Jacobians: Ec = q^2 p E = p * Ne-sum, Fc = q^2 p F = Nf-sum
        pu = embed(denominator_poly(n + m, range(n, n + m), cls.d_u), nv, xu)
        qq = embed(denominator_poly(n + m, range(n), cls.d_x), nv, xu)
        w = qq * qq * pu  # q^2 p
        Ec = [[E[i][j].times(pu) for j in range(n)] for i in range(n)]
        Fc = F
        D = [[Ec[i][j] - Fc[i][j] for j in range(n)] for i in range(n)]
        top = [[(D[i][j] + D[j][i]).scale(0.5).times(w) for j in range(n)] for i in range(n)]
        form = quad_form(top, a, a, nv)
        form = form - const_quad_form(P, a, a, nv, 0.5, w * w)
        S = [[Ec[i][j] + Fc[i][j] for j in range(n)] for i in range(n)]
        Gw = [[G[i][j].times(w) for j in range(n)] for i in range(k)]
        form = form + quad_form(S, b, a, nv, 2.0) + quad_form(Gw, c, a, nv, 2.0)
        form = form + const_quad_form(P, b, b, nv, 2.0)
    sq = Poly(nv)
    for i in a:
        sq = sq + _lam(nv, i) * _lam(nv, i)
    csq = Poly(nv)
    for i in c:
        csq = csq + _lam(nv, i) * _lam(nv, i)
    form = form - PolyExpr.from_poly(sq, margin) + PolyExpr.from_poly(csq, 1.0)
    add_sos(program, form, nfree=n + m, nmult=2 * n + k, label="stability-sos")


def assemble_stability_certificate(cls: ModelClass, metric=None, margin: float = 1e-6, r0: float | None = None) -> ConicProgram:
    """Feasibility program for the global certificate of a fully fixed class.

    ``P`` is a decision unless ``metric`` is given; ``r0`` adds the global
    monotonicity block.
    """
    cls.check_degrees("global-sos")
    prog = ConicProgram()
    dec = declare(prog, cls, metric)
    add_stability_certificate(prog, cls, dec, margin)
    if r0 is not None:
        add_global_monotonicity(prog, cls, dec, r0)
    prog.meta.update(kind="certificate", decisions=dec, r0=r0, domain=cls.domain)
    return prog


# ---------------------------------------------------------------------------
# Global RIE upper bound per sample
# ---------------------------------------------------------------------------


def _shifted_component(cls: ModelClass, name: str, x, u, nv: int) -> list[Poly]:
    """Basis functions of ``name`` at ``(x + D, u)`` as polynomials in ``D`` (numerators)."""
    n, m = cls.n, cls.m
    center = np.concatenate([x, u])
    free = [True] * n + [False] * m
    out = []
    for mono in cls.basis(name).monomials():
        p = shifted_monomial(mono, center, free)
        out.append(embed(p, nv, list(range(n)) + [0] * m))
    return out


def global_rie_form(cls: ModelClass, dec: Decisions, s: Affine, sample) -> tuple[PolyExpr, int, int]:
    """Dehomogenized scalarized bound form in ``(D, lam_v, lam_y)``."""
    v, x, u, y = sample
    n, m, k = cls.n, cls.m, cls.k
    nv = 2 * n + k
    D = list(range(n))
    lv = list(range(n, 2 * n))
    ly = list(range(2 * n, 2 * n + k))
    C = dec.coef
    ones = Poly.constant(nv, 1.0)

    def row_exprs(name, polys, rows):
        return [combine([(C[name][i : i + 1, t : t + 1], polys[t]) for t in range(len(polys))], nv) for i in range(rows)]

    ebar = row_exprs("e", _shifted_component(cls, "e", x, np.zeros(m), nv), n)
    fbar = row_exprs("f", _shifted_component(cls, "f", x, u, nv), n)
    gx = row_exprs("g", _shifted_component(cls, "g", x, u, nv), k)
    from ..model import component_features

    phi_e0, dphi_e0 = component_features(cls.e_basis, x[None], np.zeros((1, m)), cls.d_x, 0)
    e0 = C["e"] @ phi_e0[0][:, None]  # e(x) (n,1), affine
    if cls.domain == "dt":
        phi_ev, _ = component_features(cls.e_basis, v[None], np.zeros((1, m)), 0, 0)
        ev = C["e"] @ phi_ev[0][:, None]
        de = [ebar[i] - PolyExpr.from_poly(ones, e0[i : i + 1, :]) for i in range(n)]
        dv = [fbar[i] - PolyExpr.from_poly(ones, ev[i : i + 1, :]) for i in range(n)]
        dy = [gx[i] - PolyExpr.from_poly(ones, Affine(np.array([[y[i]]]))) for i in range(k)]
        form = PolyExpr.from_poly(ones, s)
        form = form - const_quad_form(dec.P, D, D, nv)
        for i in range(n):
            form = form + de[i].times(_lam(nv, D[i])).scale(2.0) + dv[i].times(_lam(nv, lv[i])).scale(2.0)
        for i in range(k):
            form = form + dy[i].times(_lam(nv, ly[i])).scale(2.0)
        form = form + const_quad_form(dec.P, lv, lv, nv)
    else:
        # clear q(x + D): multiply the block by diag(q, I, I)
        qD = Poly.constant(nv, 1.0)
        if cls.d_x:
            qn = denominator_poly(n, range(n), cls.d_x)
            sub = [Poly.variable(nv, i) + float(x[i]) for i in range(n)]
            qD = qn.compose(sub)
        pu = float((1.0 + u @ u) ** cls.d_u) if m else 1.0
        E0 = C["e"] @ dphi_e0[0]
        Ev = E0 @ v[:, None]
        de = [ebar[i] - PolyExpr.from_poly(qD, e0[i : i + 1, :]) for i in range(n)]  # q * de
        fw = [fbar[i].scale(1.0 / pu) - PolyExpr.from_poly(qD, Ev[i : i + 1, :]) for i in range(n)]  # q * fw
        dy = [gx[i].times(qD) - PolyExpr.from_poly(qD, Affine(np.array([[y[i]]]))) for i in range(k)]
        form = PolyExpr.from_poly(qD * qD, s)
        form = form - const_quad_form(dec.P, D, D, nv, 0.5, qD * qD)
        for i in range(n):
            form = form + (de[i] - fw[i]).times(_lam(nv, D[i]) * qD)
            form = form + (de[i] + fw[i]).times(_lam(nv, lv[i])).scale(2.0)
        for i in range(k):
            form = form + dy[i].times(_lam(nv, ly[i])).scale(2.0)
        form = form + const_quad_form(dec.P, lv, lv, nv, 2.0)
    ysq = Poly(nv)
    for i in ly:
        ysq = ysq + _lam(nv, i) * _lam(nv, i)
    form = form + PolyExpr.from_poly(ysq, 1.0)
    return form, n, n + k


def assemble_global(cls: ModelClass, ds: Dataset, opts: FitOptions = FitOptions()) -> ConicProgram:
    """Minimize the sum of per-sample SOS upper bounds on the global RIE."""
    _check_dataset(cls, ds)
    cls.check_degrees(opts.stability)
    if cls.domain == "dt":
        de, df = cls.e_basis.degree, max(cls.f_basis.degree, cls.g_basis.degree)
        if 2 * df > de + 1:
            raise DegreeError(f"global RIE bound needs 2 deg(f, g) <= deg(e) + 1; got 2*{df} > {de}+1")
    prog = ConicProgram()
    dec = declare(prog, cls, opts.metric)
    s = prog.add_variable("s", (ds.N, 1))
    for i, smp in enumerate(zip(ds.v, ds.x, ds.u, ds.y)):
        form, nfree, nmult = global_rie_form(cls, dec, s[i : i + 1, :], smp)
        add_sos(prog, form, nfree=nfree, nmult=nmult, dehomogenized=True, label="global-rie")
    r0 = _resolve_r0(cls, opts)
    if r0 is not None and opts.monotone != "off":
        if opts.monotone == "global-sos":
            add_global_monotonicity(prog, cls, dec, r0)
        else:
            from .assemble import _Features, _monotone_blocks

            _monotone_blocks(prog, cls, dec, _Features(cls, ds), ds.N, r0, "per-sample")
    if opts.stability == "global-sos":
        add_stability_certificate(prog, cls, dec, opts.margin)
    prog.minimize(Affine(np.ones((1, ds.N))) @ s)
    prog.meta.update(kind="global", decisions=dec, r0=r0 if opts.monotone != "off" else None, domain=cls.domain)
    return prog
