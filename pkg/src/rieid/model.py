"""Implicit polynomial/rational state-space models.

A model is the triple of maps

    DT:  e(x(t+1)) = f(x(t), u(t)),       y(t) = g(x(t), u(t))
    CT:  d/dt e(x(t)) = f(x(t), u(t)),    y(t) = g(x(t), u(t))

with each component a dense coefficient matrix over an explicit monomial
basis in (x, u). In continuous time ``e`` and ``f`` carry the fixed
denominators ``q(x) = (1 + |x|^2)^d_x`` and ``q(x) p(u)`` with
``p(u) = (1 + |u|^2)^d_u``; both are >= 1 by construction.

All Jacobians are taken with respect to ``x`` and are computed from the
exact derivative of the basis, never by differencing.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .poly import Poly

SCHEMA_VERSION = 1
DOMAINS = ("dt", "ct")


class ModelFormatError(ValueError):
    """Raised when a model document cannot be parsed."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DegreeError(ValueError):
    """A model class violates the degree rules needed by a certificate."""


# ---------------------------------------------------------------------------
# Monomial bases
# ---------------------------------------------------------------------------


def _grlex_key(e: Sequence[int]):
    return (sum(e), tuple(-a for a in e))


@dataclass(frozen=True, eq=False)
class MonomialBasis:
    """Monomials ``x^a u^b`` in ``n`` state and ``m`` input variables.

    Terms are kept in graded lexicographic order (total degree first, then
    ``x1`` before ``x2`` before ``u1`` ...), which makes serialization and
    coefficient layout deterministic.
    """

    n: int
    m: int
    exps: np.ndarray  # (T, n + m) ints

    def __post_init__(self):
        exps = np.asarray(self.exps, dtype=np.int64).reshape(-1, self.n + self.m)
        if (exps < 0).any():
            raise ValueError("exponents must be nonnegative")
        rows = [tuple(int(a) for a in r) for r in exps]
        if len(set(rows)) != len(rows):
            raise ValueError("duplicate monomials in basis")
        rows.sort(key=_grlex_key)
        exps = np.array(rows, dtype=np.int64).reshape(-1, self.n + self.m)
        exps.setflags(write=False)
        object.__setattr__(self, "exps", exps)

    def __len__(self) -> int:
        return self.exps.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MonomialBasis)
            and (self.n, self.m) == (other.n, other.m)
            and np.array_equal(self.exps, other.exps)
        )

    def __hash__(self):
        return hash((self.n, self.m, self.exps.tobytes()))

    @property
    def x_exps(self) -> np.ndarray:
        return self.exps[:, : self.n]

    @property
    def u_exps(self) -> np.ndarray:
        return self.exps[:, self.n :]

    @property
    def degree(self) -> int:
        return int(self.exps.sum(axis=1).max()) if len(self) else 0

    def jacobian_degree(self) -> int:
        """Total degree in (x, u) of the x-Jacobian of a generic member."""
        has_x = self.x_exps.sum(axis=1) > 0
        if not has_x.any():
            return -1
        return int(self.exps[has_x].sum(axis=1).max()) - 1

    def depends_on_input(self) -> bool:
        return bool(self.u_exps.any())

    def monomials(self) -> list[tuple[int, ...]]:
        return [tuple(int(a) for a in r) for r in self.exps]

    def polys(self) -> list[Poly]:
        return [Poly.monomial(r) for r in self.monomials()]

    def values(self, Z: np.ndarray) -> np.ndarray:
        """Monomial values at points ``Z`` of shape (B, n + m) -> (B, T)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.prod(Z[:, None, :] ** self.exps[None, :, :], axis=2)

    def x_jacobian(self, Z: np.ndarray) -> np.ndarray:
        """d(monomial)/dx at points ``Z`` -> (B, T, n)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        B, T = Z.shape[0], len(self)
        out = np.zeros((B, T, self.n))
        for i in range(self.n):
            a = self.exps[:, i]
            if not a.any():
                continue
            lowered = self.exps.copy()
            lowered[:, i] = np.maximum(a - 1, 0)
            out[:, :, i] = a[None, :] * np.prod(Z[:, None, :] ** lowered[None], axis=2)
        return out


def build_basis(
    n: int,
    m: int = 0,
    *,
    total: int | None = None,
    x_degree: int | None = None,
    u_degree: int | None = None,
    per_x: int | None = None,
    per_u: int | None = None,
    min_degree: int = 0,
    cross: bool = True,
) -> MonomialBasis:
    """Enumerate the monomials allowed by a degree specification.

    Parameters
    ----------
    total : cap on the total degree in (x, u).
    x_degree, u_degree : caps on the total degree in x alone / u alone.
    per_x, per_u : caps on the degree of each individual coordinate.
    min_degree : drop monomials of lower total degree (1 removes the constant).
    cross : if False, no monomial mixes x and u.

    At least one cap must bound each group of variables that is present.
    """
    for name, val in dict(total=total, x_degree=x_degree, u_degree=u_degree, per_x=per_x, per_u=per_u).items():
        if val is not None and val < 0:
            raise ValueError(f"{name} must be >= 0")

    def cap(group_total, per):
        caps = [c for c in (total, group_total, per) if c is not None]
        return min(caps) if caps else None

    cx, cu = cap(x_degree, per_x), cap(u_degree, per_u)
    if n and cx is None:
        raise ValueError("state degree is unbounded")
    if m and cu is None:
        raise ValueError("input degree is unbounded")
    ranges = [range((cx or 0) + 1)] * n + [range((cu or 0) + 1)] * m
    rows = []
    for e in itertools.product(*ranges):
        ex, eu = e[:n], e[n:]
        dx, du = sum(ex), sum(eu)
        if total is not None and dx + du > total:
            continue
        if x_degree is not None and dx > x_degree:
            continue
        if u_degree is not None and du > u_degree:
            continue
        if dx + du < min_degree:
            continue
        if not cross and dx and du:
            continue
        rows.append(e)
    return MonomialBasis(n, m, np.array(rows, dtype=np.int64).reshape(-1, n + m))


# ---------------------------------------------------------------------------
# Denominators q(x) = (1 + |x|^2)^d_x, p(u) = (1 + |u|^2)^d_u
# ---------------------------------------------------------------------------


def denominator(V: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Value and gradient of ``(1 + |v|^2)^d`` at rows of ``V``."""
    V = np.atleast_2d(V)
    s = 1.0 + np.sum(V * V, axis=1)
    if d == 0:
        return np.ones(V.shape[0]), np.zeros_like(V)
    val = s**d
    grad = (2.0 * d * s ** (d - 1))[:, None] * V
    return val, grad


def denominator_poly(nvars: int, positions: Sequence[int], d: int) -> Poly:
    """``(1 + sum_{i in positions} z_i^2)^d`` as a polynomial in ``nvars`` variables."""
    base = Poly.constant(nvars, 1.0)
    for i in positions:
        mono = [0] * nvars
        mono[i] = 2
        base = base + Poly.monomial(mono)
    return base**d


def component_features(
    basis: MonomialBasis, X: np.ndarray, U: np.ndarray, d_x: int = 0, d_u: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Basis functions divided by ``q(x)^[d_x>0] p(u)^[d_u>0]`` and their x-Jacobians.

    Returns ``(phi, dphi)`` with shapes (B, T) and (B, T, n). A component is
    then ``coef @ phi`` and its Jacobian ``coef @ dphi``, both linear in the
    coefficients; this is what keeps fitting programs affine.
    """
    X = np.atleast_2d(X)
    U = np.atleast_2d(U) if basis.m else np.zeros((X.shape[0], 0))
    Z = np.hstack([X, U])
    phi = basis.values(Z)
    dphi = basis.x_jacobian(Z)
    if d_x == 0 and d_u == 0:
        return phi, dphi
    q, dq = denominator(X, d_x)
    p, _ = denominator(U, d_u) if basis.m else (np.ones(X.shape[0]), None)
    den = (q * p)[:, None]
    dphi = dphi / den[:, :, None] - phi[:, :, None] * dq[:, None, :] / (q * q * p)[:, None, None]
    return phi / den, dphi


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    """Affine map from raw units to model coordinates.

    ``x_n = (x - x_offset) / x_scale`` and likewise for ``u`` and ``y``; the
    scales are joint (one scalar per signal group). In continuous time the
    clock is also rescaled, ``t_n = t / time_scale``, so state rates map as
    ``v_n = v * time_scale / x_scale``.
    """

    x_offset: np.ndarray
    x_scale: float
    u_offset: np.ndarray
    u_scale: float
    y_offset: np.ndarray
    y_scale: float
    time_scale: float = 1.0

    def __post_init__(self):
        for name in ("x_offset", "u_offset", "y_offset"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        for name in ("x_scale", "u_scale", "y_scale", "time_scale"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def identity(cls, n: int, m: int, k: int) -> "Normalization":
        return cls(np.zeros(n), 1.0, np.zeros(m), 1.0, np.zeros(k), 1.0)

    def x(self, x):
        return (np.asarray(x, float) - self.x_offset) / self.x_scale

    def u(self, u):
        return (np.asarray(u, float) - self.u_offset) / self.u_scale

    def y(self, y):
        return (np.asarray(y, float) - self.y_offset) / self.y_scale

    def v(self, v, domain: str):
        if domain == "dt":
            return self.x(v)
        return np.asarray(v, float) * self.time_scale / self.x_scale

    def t(self, t):
        return np.asarray(t, float) / self.time_scale

    def x_raw(self, xn):
        return np.asarray(xn, float) * self.x_scale + self.x_offset

    def u_raw(self, un):
        return np.asarray(un, float) * self.u_scale + self.u_offset

    def y_raw(self, yn):
        return np.asarray(yn, float) * self.y_scale + self.y_offset

    def to_dict(self) -> dict:
        return {
            "x": {"offset": self.x_offset.tolist(), "scale": float(self.x_scale)},
            "u": {"offset": self.u_offset.tolist(), "scale": float(self.u_scale)},
            "y": {"offset": self.y_offset.tolist(), "scale": float(self.y_scale)},
            "time_scale": float(self.time_scale),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalization":
        return cls(
            d["x"]["offset"], d["x"]["scale"],
            d["u"]["offset"], d["u"]["scale"],
            d["y"]["offset"], d["y"]["scale"],
            d.get("time_scale", 1.0),
        )

    def same_as(self, other: "Normalization | None") -> bool:
        if other is None:
            return False
        return all(
            np.allclose(a, b, rtol=1e-12, atol=0)
            for a, b in zip(
                (self.x_offset, self.x_scale, self.u_offset, self.u_scale, self.y_offset, self.y_scale, self.time_scale),
                (other.x_offset, other.x_scale, other.u_offset, other.u_scale, other.y_offset, other.y_scale, other.time_scale),
            )
        )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelEval:
    e: np.ndarray
    f: np.ndarray
    g: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImplicitModel:
    domain: str
    e_basis: MonomialBasis
    e_coef: np.ndarray
    f_basis: MonomialBasis
    f_coef: np.ndarray
    g_basis: MonomialBasis
    g_coef: np.ndarray
    d_x: int = 0
    d_u: int = 0
    r0: float | None = None
    normalization: Normalization | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        n, m = self.e_basis.n, self.e_basis.m
        for b in (self.f_basis, self.g_basis):
            if (b.n, b.m) != (n, m):
                raise ValueError("all bases must share the same (n, m)")
        if self.e_basis.depends_on_input():
            raise ValueError("e must depend on the state only")
        for name, basis, rows in (("e", self.e_basis, n), ("f", self.f_basis, n), ("g", self.g_basis, None)):
            c = _frozen(getattr(self, name + "_coef"))
            if c.ndim != 2 or c.shape[1] != len(basis) or (rows is not None and c.shape[0] != rows):
                raise ValueError(f"{name} coefficients have shape {c.shape}, expected ({rows or 'k'}, {len(basis)})")
            object.__setattr__(self, name + "_coef", c)
        if self.d_x < 0 or self.d_u < 0:
            raise ValueError("denominator degrees must be >= 0")
        if self.domain == "dt" and (self.d_x or self.d_u):
            raise ValueError("rational denominators are only used in continuous time")
        if self.r0 is not None and not self.r0 > 0:
            raise ValueError("r0 must be positive when present")

    @property
    def n(self) -> int:
        return self.e_basis.n

    @property
    def m(self) -> int:
        return self.e_basis.m

    @property
    def k(self) -> int:
        return self.g_coef.shape[0]

    def with_(self, **changes) -> "ImplicitModel":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ImplicitModel(**kw)

    def is_linear(self) -> bool:
        return all(b.degree <= 1 for b in (self.e_basis, self.f_basis, self.g_basis)) and not (self.d_x or self.d_u)

    # -- batched evaluation -------------------------------------------------

    def _check(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n:
            raise ValueError(f"state has dimension {X.shape[1]}, model expects {self.n}")
        if U is None:
            U = np.zeros((X.shape[0], self.m))
        U = np.asarray(U, dtype=float).reshape(-1, self.m) if self.m else np.zeros((X.shape[0], 0))
        if U.shape[0] == 1 and X.shape[0] > 1:
            U = np.repeat(U, X.shape[0], axis=0)
        if U.shape[0] != X.shape[0]:
            raise ValueError("state and input batches differ in length")
        return X, U

    def e_jac(self, X) -> tuple[np.ndarray, np.ndarray]:
        X, U = self._check(X, None)
        phi, dphi = component_features(self.e_basis, X, U, self.d_x, 0)
        return phi @ self.e_coef.T, np.einsum("it,btj->bij", self.e_coef, dphi)

    def f_jac(self, X, U) -> tuple[np.ndarray, np.ndarray]:
        X, U = self._check(X, U)
        phi, dphi = component_features(self.f_basis, X, U, self.d_x, self.d_u)
        return phi @ self.f_coef.T, np.einsum("it,btj->bij", self.f_coef, dphi)

    def g_jac(self, X, U) -> tuple[np.ndarray, np.ndarray]:
        X, U = self._check(X, U)
        phi, dphi = component_features(self.g_basis, X, U)
        return phi @ self.g_coef.T, np.einsum("it,btj->bij", self.g_coef, dphi)

    def e_values(self, X) -> np.ndarray:
        X, U = self._check(X, None)
        phi, _ = component_features(self.e_basis, X, U, self.d_x, 0)
        return phi @ self.e_coef.T

    def evaluate_batch(self, X, U) -> ModelEval:
        e, E = self.e_jac(X)
        f, F = self.f_jac(X, U)
        g, G = self.g_jac(X, U)
        return ModelEval(e, f, g, E, F, G)


def evaluate(model: ImplicitModel, x, u=None) -> ModelEval:
    """Values and x-Jacobians of e, f, g at a single point."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.n:
        raise ValueError(f"state has dimension {x.size}, model expects {model.n}")
    u = np.zeros(model.m) if u is None else np.asarray(u, dtype=float).ravel()
    if u.size != model.m:
        raise ValueError(f"input has dimension {u.size}, model expects {model.m}")
    ev = model.evaluate_batch(x[None], u[None])
    return ModelEval(*(a[0] for a in (ev.e, ev.f, ev.g, ev.E, ev.F, ev.G)))


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModel:
    """``x+ = A x + B u`` (or ``x' = ...``), ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (self.A, self.B, self.C, self.D))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n or D.shape != (C.shape[0], B.shape[1]):
            raise ValueError("inconsistent (A, B, C, D) dimensions")
        for name, M in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, M)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def k(self):
        return self.C.shape[0]

    def to_model(self, domain: str = "dt", E: np.ndarray | None = None) -> ImplicitModel:
        """Implicit form with ``e(x) = E x``, ``f = E A x + E B u``."""
        E = np.eye(self.n) if E is None else np.asarray(E, float)
        return implicit_linear(domain, E, E @ self.A, E @ self.B, self.C, self.D)

    def recovery_residuals(self, E, F, L, G, H) -> dict[str, float]:
        """Relative residuals of the recovery predicate G=C, H=D, EB=L, EA=F."""

        def rel(a, b):
            return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))

        return {
            "EA=F": rel(E @ self.A, F),
            "EB=L": rel(E @ self.B, L),
            "G=C": rel(G, self.C),
            "H=D": rel(H, self.D),
        }


def linear_basis(n: int, m: int, affine: bool = False, state_only: bool = False) -> MonomialBasis:
    rows = [np.eye(n + m, dtype=int)[i] for i in range(n if state_only else n + m)]
    if affine:
        rows.append(np.zeros(n + m, dtype=int))
    return MonomialBasis(n, m, np.array(rows).reshape(-1, n + m))


def implicit_linear(domain, E, F, L, G, H, r0=None) -> ImplicitModel:
    """Build ``E x+ = F x + L u``, ``y = G x + H u`` as an ImplicitModel."""
    E, F, L, G, H = (np.atleast_2d(np.asarray(M, float)) for M in (E, F, L, G, H))
    n, m = F.shape[0], L.shape[1]
    xb = linear_basis(n, m, state_only=True)
    xub = linear_basis(n, m)
    return ImplicitModel(domain, xb, E, xub, np.hstack([F, L]), xub, np.hstack([G, H]), r0=r0)


def linear_parts(model: ImplicitModel) -> tuple[np.ndarray, ...]:
    """Return ``(E, F, L, G, H, f0, g0)`` of a model whose maps are affine."""
    if not model.is_linear():
        raise ValueError("model is not affine")
    n, m = model.n, model.m
    out = []
    for basis, coef, rows in (
        (model.e_basis, model.e_coef, n),
        (model.f_basis, model.f_coef, n),
        (model.g_basis, model.g_coef, model.k),
    ):
        lin = np.zeros((rows, n + m))
        const = np.zeros(rows)
        for j, e in enumerate(basis.exps):
            if e.sum() == 0:
                const += coef[:, j]
            else:
                lin[:, int(np.argmax(e))] += coef[:, j]
        out.append((lin, const))
    (Ee, e0), (Ff, f0), (Gg, g0) = out
    return Ee[:, :n], Ff[:, :n], Ff[:, n:], Gg[:, :n], Gg[:, n:], f0 - e0, g0


# ---------------------------------------------------------------------------
# Model classes (what a fit searches over)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelClass:
    """Bases for e, f, g plus any components held fixed during fitting.

    ``fixed`` maps a component name (``"e"``, ``"f"``, ``"g"``) to a numeric
    coefficient matrix that is not a decision variable.
    """

    domain: str
    n: int
    m: int
    k: int
    e_basis: MonomialBasis
    f_basis: MonomialBasis
    g_basis: MonomialBasis
    d_x: int = 0
    d_u: int = 0
    r0: float | None = None
    fixed: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        for b in (self.e_basis, self.f_basis, self.g_basis):
            if (b.n, b.m) != (self.n, self.m):
                raise DegreeError("basis arity does not match (n, m)")
        if self.e_basis.depends_on_input():
            raise DegreeError("e may not depend on the input")
        if self.domain == "dt" and (self.d_x or self.d_u):
            raise DegreeError("rational denominators are only used in continuous time")
        rows = {"e": self.n, "f": self.n, "g": self.k}
        fixed = {}
        for name, val in dict(self.fixed).items():
            if name not in rows:
                raise ValueError(f"unknown component {name!r}")
            val = _frozen(val)
            if val.shape != (rows[name], len(self.basis(name))):
                raise ValueError(f"fixed {name} has shape {val.shape}")
            fixed[name] = val
        object.__setattr__(self, "fixed", fixed)

    def basis(self, name: str) -> MonomialBasis:
        return {"e": self.e_basis, "f": self.f_basis, "g": self.g_basis}[name]

    def rows(self, name: str) -> int:
        return {"e": self.n, "f": self.n, "g": self.k}[name]

    def denominators(self, name: str) -> tuple[int, int]:
        return {"e": (self.d_x, 0), "f": (self.d_x, self.d_u), "g": (0, 0)}[name]

    def is_linear(self) -> bool:
        return all(self.basis(c).degree <= 1 for c in "efg") and not (self.d_x or self.d_u)

    def check_degrees(self, stability: str = "off") -> None:
        """Enforce the degree rules that make a global certificate possible.

        DT: the Jacobian of e must have at least twice the degree of the
        Jacobians of f and g. CT (rational form): numerators of degree at most
        2 d_x + 1 in each state and f-numerator of degree at most 2 d_u in
        each input.
        """
        if stability != "global-sos":
            return
        if self.domain == "dt":
            de = self.e_basis.jacobian_degree()
            for name in ("f", "g"):
                dj = self.basis(name).jacobian_degree()
                if dj >= 0 and 2 * dj > de:
                    raise DegreeError(
                        f"DT global certificate needs deg(E) >= 2 deg({name.upper()}); got {de} < 2*{dj}"
                    )
        else:
            cap_x = 2 * self.d_x + 1
            for name in ("e", "f"):
                b = self.basis(name)
                if b.x_exps.size and b.x_exps.max() > cap_x:
                    raise DegreeError(f"CT {name} numerator exceeds degree 2*d_x+1={cap_x} in some state")
            # input-only terms of f never reach the Jacobian F
            has_x = self.f_basis.x_exps.sum(axis=1) > 0
            u_exps = self.f_basis.u_exps[has_x]
            if u_exps.size and u_exps.max() > 2 * self.d_u:
                raise DegreeError(f"CT f numerator exceeds degree 2*d_u={2 * self.d_u} in some input")

    def to_model(self, coefs: Mapping[str, np.ndarray], normalization=None) -> ImplicitModel:
        c = {name: self.fixed.get(name, coefs.get(name)) for name in "efg"}
        return ImplicitModel(
            self.domain, self.e_basis, c["e"], self.f_basis, c["f"], self.g_basis, c["g"],
            d_x=self.d_x, d_u=self.d_u, r0=self.r0, normalization=normalization,
        )

    @classmethod
    def of_model(cls, model: ImplicitModel, fixed: Sequence[str] = ("e", "f", "g")) -> "ModelClass":
        """Class sharing ``model``'s bases, with the named components held fixed."""
        return cls(
            model.domain, model.n, model.m, model.k, model.e_basis, model.f_basis, model.g_basis,
            d_x=model.d_x, d_u=model.d_u, r0=model.r0,
            fixed={name: getattr(model, name + "_coef") for name in fixed},
        )


def linear_class(domain: str, n: int, m: int, k: int, affine: bool = False, r0: float | None = None) -> ModelClass:
    xb = linear_basis(n, m, state_only=True)
    xub = linear_basis(n, m, affine=affine)
    return ModelClass(domain, n, m, k, xb, xub, xub, r0=r0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _component_doc(basis: MonomialBasis, coef: np.ndarray) -> dict:
    return {"exponents": basis.exps.tolist(), "coefficients": np.asarray(coef).tolist()}


def serialize(model: ImplicitModel, extra: Mapping[str, Any] | None = None) -> dict:
    """Versioned, JSON-compatible document for ``model``."""
    doc = {
        "version": SCHEMA_VERSION,
        "domain": model.domain,
        "n": model.n,
        "m": model.m,
        "k": model.k,
        "d_x": model.d_x,
        "d_u": model.d_u,
        "r0": model.r0,
        "e": _component_doc(model.e_basis, model.e_coef),
        "f": _component_doc(model.f_basis, model.f_coef),
        "g": _component_doc(model.g_basis, model.g_coef),
        "normalization": model.normalization.to_dict() if model.normalization else None,
    }
    if extra:
        doc.update(extra)
    return doc


def _parse_component(doc: Mapping, name: str, n: int, m: int, rows: int | None) -> tuple[MonomialBasis, np.ndarray]:
    try:
        comp = doc[name]
        raw = comp["exponents"]
        coef = comp["coefficients"]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"missing field {exc}", name) from None
    if not isinstance(raw, list) or not all(
        isinstance(r, list) and len(r) == n + m and all(isinstance(a, int) and not isinstance(a, bool) and a >= 0 for a in r)
        for r in raw
    ):
        raise ModelFormatError(f"exponents must be a list of {n + m} nonnegative integers per term", f"{name}.exponents")
    try:
        basis = MonomialBasis(n, m, np.array(raw, dtype=np.int64).reshape(-1, n + m))
    except ValueError as exc:
        raise ModelFormatError(str(exc), f"{name}.exponents") from None
    if basis.monomials() != [tuple(r) for r in raw]:
        raise ModelFormatError("exponents are not in graded lexicographic order", f"{name}.exponents")
    try:
        coef = np.array(coef, dtype=float).reshape(-1, len(basis)) if len(basis) else np.zeros((rows or 0, 0))
    except (ValueError, TypeError):
        raise ModelFormatError("coefficients do not match the basis", f"{name}.coefficients") from None
    if rows is not None and coef.shape[0] != rows:
        raise ModelFormatError(f"expected {rows} rows, got {coef.shape[0]}", f"{name}.coefficients")
    return basis, coef


def deserialize(doc: Mapping | str) -> ImplicitModel:
    """Inverse of :func:`serialize`; raises :class:`ModelFormatError`."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ModelFormatError("document must be an object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported version {version!r}", "version")
    try:
        domain, n, m, k = doc["domain"], int(doc["n"]), int(doc["m"]), int(doc["k"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"missing or invalid header field {exc}") from None
    if domain not in DOMAINS:
        raise ModelFormatError(f"unknown domain {domain!r}", "domain")
    eb, ec = _parse_component(doc, "e", n, m, n)
    fb, fc = _parse_component(doc, "f", n, m, n)
    gb, gc = _parse_component(doc, "g", n, m, k)
    norm = doc.get("normalization")
    try:
        norm = Normalization.from_dict(norm) if norm else None
        r0 = doc.get("r0")
        return ImplicitModel(
            domain, eb, ec, fb, fc, gb, gc,
            d_x=int(doc.get("d_x", 0)), d_u=int(doc.get("d_u", 0)),
            r0=None if r0 is None else float(r0), normalization=norm,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(str(exc)) from None


def save_model(model: ImplicitModel, path, extra: Mapping[str, Any] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize(model, extra), fh, indent=1)


def load_model(path) -> tuple[ImplicitModel, dict]:
    """Read a model file; also returns the raw document for extra fields."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return deserialize(doc), doc
