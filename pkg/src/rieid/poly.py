"""Sparse multivariate polynomials with float coefficients.

Used wherever a model basis has to be manipulated symbolically: shifting a
basis to a sample point, clearing rational denominators, and generating the
coefficient-matching equations of SOS constraints.
"""

from __future__ import annotations

from collections import defaultdict
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

Mono = tuple  # exponent tuple


class Poly:
    """Polynomial in ``nvars`` variables stored as ``{exponent tuple: coef}``."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[Mono, float] | None = None):
        self.nvars = int(nvars)
        self.terms: dict[Mono, float] = {}
        if terms:
            for mono, c in terms.items():
                if len(mono) != self.nvars:
                    raise ValueError(f"monomial {mono} has wrong arity for {nvars} variables")
                if c != 0.0:
                    self.terms[tuple(int(a) for a in mono)] = float(c)

    @classmethod
    def constant(cls, nvars: int, c: float) -> "Poly":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Poly":
        mono = [0] * nvars
        mono[i] = 1
        return cls(nvars, {tuple(mono): 1.0})

    @classmethod
    def monomial(cls, exps: Sequence[int], c: float = 1.0) -> "Poly":
        return cls(len(exps), {tuple(exps): c})

    def copy(self) -> "Poly":
        p = Poly(self.nvars)
        p.terms = dict(self.terms)
        return p

    @property
    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def _coerce(self, other) -> "Poly":
        if isinstance(other, Poly):
            if other.nvars != self.nvars:
                raise ValueError("polynomials live in different variable spaces")
            return other
        return Poly.constant(self.nvars, float(other))

    def __add__(self, other) -> "Poly":
        other = self._coerce(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Poly(self.nvars, out)

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Poly":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Poly":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Poly":
        if not isinstance(other, Poly):
            c = float(other)
            return Poly(self.nvars, {m: c * v for m, v in self.terms.items()})
        other = self._coerce(other)
        out: dict[Mono, float] = defaultdict(float)
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                out[tuple(a + b for a, b in zip(m1, m2))] += c1 * c2
        return Poly(self.nvars, out)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Poly":
        result = Poly.constant(self.nvars, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def deriv(self, i: int) -> "Poly":
        out = {}
        for m, c in self.terms.items():
            if m[i]:
                mm = list(m)
                mm[i] -= 1
                out[tuple(mm)] = c * m[i]
        return Poly(self.nvars, out)

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(sum(c * np.prod(z ** np.array(m)) for m, c in self.terms.items()))

    def compose(self, subs: Sequence["Poly"]) -> "Poly":
        """Substitute variable ``i`` by ``subs[i]`` (all in a common new space)."""
        if len(subs) != self.nvars:
            raise ValueError("need one substitution per variable")
        nv = subs[0].nvars if subs else 0
        powers: dict[tuple[int, int], Poly] = {}

        def power(i: int, k: int) -> Poly:
            key = (i, k)
            if key not in powers:
                powers[key] = Poly.constant(nv, 1.0) if k == 0 else power(i, k - 1) * subs[i]
            return powers[key]

        out = Poly(nv)
        for m, c in self.terms.items():
            term = Poly.constant(nv, c)
            for i, k in enumerate(m):
                if k:
                    term = term * power(i, k)
            out = out + term
        return out

    def __repr__(self) -> str:
        if not self.terms:
            return "Poly(0)"
        parts = []
        for m, c in sorted(self.terms.items(), key=lambda t: (-sum(t[0]), t[0])):
            mono = "*".join(f"z{i}^{a}" if a > 1 else f"z{i}" for i, a in enumerate(m) if a)
            parts.append(f"{c:g}" + (f"*{mono}" if mono else ""))
        return "Poly(" + " + ".join(parts) + ")"


def shifted_monomial(exps: Sequence[int], center: Sequence[float], free: Sequence[bool]) -> Poly:
    """Expand ``prod_i (c_i + d_i)^a_i`` as a polynomial in ``d``.

    Coordinates with ``free[i]`` false are frozen at ``c_i`` (no ``d_i``
    dependence). The result has one variable per coordinate; frozen ones
    simply never appear.
    """
    nv = len(exps)
    out = Poly.constant(nv, 1.0)
    for i, a in enumerate(exps):
        if a == 0:
            continue
        c = float(center[i])
        if not free[i]:
            out = out * (c ** a)
            continue
        factor = {}
        for j in range(a + 1):
            coef = comb(a, j) * c ** (a - j)
            if coef != 0.0:
                mono = [0] * nv
                mono[i] = j
                factor[tuple(mono)] = coef
        out = out * Poly(nv, factor)
    return out


def embed(p: Poly, nvars: int, positions: Iterable[int]) -> Poly:
    """Re-index ``p`` into a larger space; variable ``i`` goes to ``positions[i]``."""
    positions = list(positions)
    out = {}
    for m, c in p.terms.items():
        mm = [0] * nvars
        for i, a in enumerate(m):
            mm[positions[i]] += a
        out[tuple(mm)] = out.get(tuple(mm), 0.0) + c
    return Poly(nvars, out)
