"""Robust identification error (RIE) measures and their convex upper bounds.

Every local measure here is the supremum over ``D`` of a quadratic

    phi(D) = D' H D + 2 b' D + c,

which is evaluated exactly: ``+inf`` when ``H`` has a positive eigenvalue
(or is singular with ``b`` outside its range), ``c - b' H^+ b`` otherwise.
Global measures involve the nonlinear model maps and are only estimated
from below, by probing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy import optimize
from scipy.stats import qmc

from .data import Dataset, SampleTuple
from .model import ImplicitModel

SING_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    """Storage metric ``Q`` together with ``P = Q^{-1}``."""

    Q: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        Q, P = 0.5 * (Q + Q.T), 0.5 * (P + P.T)
        try:
            np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            raise ValueError("metric Q must be symmetric positive definite") from None
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P", P)

    @classmethod
    def from_Q(cls, Q) -> "MetricMatrix":
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        return cls(Q, np.linalg.inv(0.5 * (Q + Q.T)))

    @classmethod
    def from_P(cls, P) -> "MetricMatrix":
        P = np.atleast_2d(np.asarray(P, dtype=float))
        P = 0.5 * (P + P.T)
        return cls(np.linalg.inv(P), P)

    @classmethod
    def identity(cls, n: int) -> "MetricMatrix":
        return cls(np.eye(n), np.eye(n))

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def residual(self) -> float:
        return float(np.linalg.norm(self.Q @ self.P - np.eye(self.n)))

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MetricMatrix":
        if "Q" in d:
            return cls.from_Q(d["Q"])
        return cls.from_P(d["P"])


@dataclass(frozen=True)
class EquationErrors:
    ex: np.ndarray
    ey: np.ndarray


@dataclass(frozen=True)
class RobustnessReport:
    kind: str  # "R_dt" | "Rhat_dt" | "R_ct" | "Rhat_ct"
    matrix: np.ndarray
    max_eig: float

    @property
    def margin(self) -> float:
        """Distance of the largest eigenvalue below zero (negative when violated)."""
        return -self.max_eig

    def to_dict(self) -> dict:
        return {"kind": self.kind, "max_eig": self.max_eig, "margin": self.margin, "matrix": self.matrix.tolist()}


# ---------------------------------------------------------------------------
# Sample plumbing
# ---------------------------------------------------------------------------


def _stack_sample(sample) -> tuple[np.ndarray, ...]:
    if isinstance(sample, SampleTuple):
        v, x, u, y = sample.v, sample.x, sample.u, sample.y
    else:
        v, x, u, y = sample
    return tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in (v, x, u, y))


def _arrays(model: ImplicitModel, ds: Dataset):
    if ds.domain != model.domain:
        raise ValueError(f"dataset domain {ds.domain!r} does not match model domain {model.domain!r}")
    ds.require_tuples()
    if (ds.n, ds.m, ds.k) != (model.n, model.m, model.k):
        raise ValueError(f"dataset dims {(ds.n, ds.m, ds.k)} do not match model {(model.n, model.m, model.k)}")
    return ds.v, ds.x, ds.u, ds.y


def _errors(model: ImplicitModel, V, X, U, Y):
    ev = model.evaluate_batch(X, U)
    if model.domain == "dt":
        ex = ev.f - model.e_values(V)
    else:
        ex = ev.f - np.einsum("bij,bj->bi", ev.E, V)
    return ex, ev.g - Y, ev


def equation_errors(model: ImplicitModel, sample, domain: str | None = None) -> EquationErrors:
    """``ex = f(x,u) - e(v)`` (DT) or ``f(x,u) - E(x) v`` (CT); ``ey = g(x,u) - y``."""
    if domain is not None and domain != model.domain:
        raise ValueError(f"sample domain {domain!r} does not match model domain {model.domain!r}")
    V, X, U, Y = _stack_sample(sample)
    if V.shape[1] != model.n or X.shape[1] != model.n or U.shape[1] != model.m or Y.shape[1] != model.k:
        raise ValueError("sample dimensions do not match the model")
    ex, ey, _ = _errors(model, V, X, U, Y)
    return EquationErrors(ex[0], ey[0])


def equation_errors_batch(model: ImplicitModel, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    ex, ey, _ = _errors(model, *_arrays(model, ds))
    return ex, ey


# ---------------------------------------------------------------------------
# Quadratic suprema
# ---------------------------------------------------------------------------


def quadratic_sup(H, b, c, tol: float = SING_TOL) -> float:
    """``sup_D D'HD + 2b'D + c``; ``inf`` when unbounded."""
    return float(quadratic_sup_batch(np.asarray(H)[None], np.asarray(b)[None], np.atleast_1d(c))[0])


def quadratic_sup_batch(H: np.ndarray, b: np.ndarray, c: np.ndarray, tol: float = SING_TOL) -> np.ndarray:
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    w, V = np.linalg.eigh(H)
    scale = np.maximum(np.abs(w).max(axis=1), 1e-300)
    bh = np.einsum("bji,bj->bi", V, b)
    pos = (w > tol * scale[:, None]).any(axis=1)
    neg = w < -tol * scale[:, None]
    bscale = np.maximum(np.linalg.norm(b, axis=1), 1e-300)
    stray = (~neg & (np.abs(bh) > tol * np.maximum(bscale, scale)[:, None])).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(neg, bh * bh / np.where(neg, -w, 1.0), 0.0).sum(axis=1)
    out = np.asarray(c, dtype=float) + gain
    out[pos | stray] = math.inf
    return out


def _local_pieces(model: ImplicitModel, metric: MetricMatrix, V, X, U, Y, upper: bool):
    ex, ey, ev = _errors(model, V, X, U, Y)
    E, F, G = ev.E, ev.F, ev.G
    Q, P = metric.Q, metric.P
    Et, Ft, Gt = (np.swapaxes(M, 1, 2) for M in (E, F, G))
    GG = Gt @ G
    Qex = ex @ Q  # Q symmetric
    if model.domain == "dt":
        FQF = Ft @ Q @ F
        H = FQF + P[None] - E - Et + GG if upper else FQF - Et @ Q @ E + GG
        b = np.einsum("bji,bj->bi", F, Qex) + np.einsum("bji,bj->bi", G, ey)
        c = np.einsum("bi,bi->b", ex, Qex) + np.einsum("bi,bi->b", ey, ey)
    elif not upper:
        EQF = Et @ Q @ F
        H = EQF + np.swapaxes(EQF, 1, 2) + GG
        b = np.einsum("bji,bj->bi", E, Qex) + np.einsum("bji,bj->bi", G, ey)
        c = np.einsum("bi,bi->b", ey, ey)
    else:
        S, D = E + F, E - F
        H = 0.5 * (np.swapaxes(S, 1, 2) @ Q @ S) + 0.5 * P[None] - 0.5 * (D + np.swapaxes(D, 1, 2)) + GG
        b = 0.5 * np.einsum("bji,bj->bi", S, Qex) + 0.5 * ex + np.einsum("bji,bj->bi", G, ey)
        c = 0.5 * np.einsum("bi,bi->b", ex, Qex) + np.einsum("bi,bi->b", ey, ey)
    return H, b, c


def local_rie(model: ImplicitModel, metric: MetricMatrix, sample) -> float:
    """Local RIE of one sample (exact supremum, ``inf`` when unbounded)."""
    H, b, c = _local_pieces(model, metric, *_stack_sample(sample), upper=False)
    return float(quadratic_sup_batch(H, b, c)[0])


def local_rie_upper(model: ImplicitModel, metric: MetricMatrix, sample) -> float:
    """Convex upper bound of the local RIE of one sample."""
    H, b, c = _local_pieces(model, metric, *_stack_sample(sample), upper=True)
    return float(quadratic_sup_batch(H, b, c)[0])


def local_rie_batch(model: ImplicitModel, metric: MetricMatrix, ds: Dataset, upper: bool = False) -> np.ndarray:
    H, b, c = _local_pieces(model, metric, *_arrays(model, ds), upper=upper)
    return quadratic_sup_batch(H, b, c)


# ---------------------------------------------------------------------------
# Global RIE (lower estimate)
# ---------------------------------------------------------------------------


def global_rie_integrand(model: ImplicitModel, metric: MetricMatrix, sample, D: np.ndarray) -> np.ndarray:
    """Value of the global-RIE objective at perturbations ``D`` (rows)."""
    V, X, U, Y = _stack_sample(sample)
    D = np.atleast_2d(D)
    Xd = X + D
    Ud = np.repeat(U, D.shape[0], axis=0)
    Q = metric.Q
    fd = model.f_jac(Xd, Ud)[0]
    de = model.e_values(Xd) - model.e_values(X)
    dy = model.g_jac(Xd, Ud)[0] - Y
    if model.domain == "dt":
        dv = fd - model.e_values(V)
        return np.einsum("bi,ij,bj->b", dv, Q, dv) - np.einsum("bi,ij,bj->b", de, Q, de) + np.sum(dy * dy, axis=1)
    E = model.e_jac(X)[1][0]
    dv = fd - (E @ V[0])[None]
    return 2 * np.einsum("bi,ij,bj->b", de, Q, dv) + np.sum(dy * dy, axis=1)


def probe_points(n: int, count: int, radius: float) -> np.ndarray:
    """Deterministic low-discrepancy points in the ball of ``radius`` (origin included)."""
    if n == 0:
        return np.zeros((1, 0))
    m = max(1, math.ceil(math.log2(max(count, 2) * (2.0 ** n))))
    pts = qmc.Sobol(d=n, scramble=False).random_base2(m) * 2.0 - 1.0
    pts = pts[np.linalg.norm(pts, axis=1) <= 1.0][: max(count - 1, 0)]
    return np.vstack([np.zeros((1, n)), radius * pts])


def global_rie_lower(
    model: ImplicitModel,
    metric: MetricMatrix,
    sample,
    probes: int = 256,
    radius: float = 3.0,
    polish: int = 3,
) -> float:
    """Lower estimate of the global RIE by probing (and locally polishing).

    Every returned value is attained by some perturbation, so it never
    exceeds the true supremum. This is a falsification tool only.
    """
    D = probe_points(model.n, probes, radius)
    vals = global_rie_integrand(model, metric, sample, D)
    best = float(vals.max())
    for i in np.argsort(vals)[::-1][:polish]:
        res = optimize.minimize(
            lambda d: -float(global_rie_integrand(model, metric, sample, d[None])[0]),
            D[i], method="BFGS", options={"maxiter": 200, "gtol": 1e-12},
        )
        if np.isfinite(res.fun):
            best = max(best, -float(res.fun))
    return best


def global_rie_lower_batch(model, metric, ds: Dataset, probes: int = 256, radius: float | None = None, polish: int = 1) -> np.ndarray:
    _arrays(model, ds)
    if radius is None:
        radius = 3.0 * float(np.max(np.linalg.norm(ds.x, axis=1)))
    return np.array([global_rie_lower(model, metric, s, probes, radius, polish) for s in ds.samples()])


# ---------------------------------------------------------------------------
# Robustness matrices
# ---------------------------------------------------------------------------


def robustness_matrices_at(domain: str, E, F, G, metric: MetricMatrix) -> list[RobustnessReport]:
    E, F, G = (np.atleast_2d(np.asarray(M, float)) for M in (E, F, G))
    Q, P = metric.Q, metric.P
    GG = G.T @ G
    if domain == "dt":
        mats = {
            "R_dt": F.T @ Q @ F - E.T @ Q @ E + GG,
            "Rhat_dt": F.T @ Q @ F + P - E.T - E + GG,
        }
    else:
        EQF = E.T @ Q @ F
        S, D = E + F, E - F
        mats = {
            "R_ct": EQF + EQF.T + GG,
            "Rhat_ct": 0.5 * S.T @ Q @ S + 0.5 * P - 0.5 * (D + D.T) + GG,
        }
    out = []
    for kind, M in mats.items():
        M = 0.5 * (M + M.T)
        out.append(RobustnessReport(kind, M, float(np.linalg.eigvalsh(M).max())))
    return out


def robustness_matrices(model: ImplicitModel, metric: MetricMatrix, sample) -> list[RobustnessReport]:
    """Local-RIE Hessians (R) and their convex-bound counterparts (Rhat) at a sample."""
    _, X, U, _ = _stack_sample(sample)
    ev = model.evaluate_batch(X, U)
    return robustness_matrices_at(model.domain, ev.E[0], ev.F[0], ev.G[0], metric)


def max_eig_batch(model: ImplicitModel, metric: MetricMatrix, X, U, kind: str = "Rhat") -> np.ndarray:
    """Largest eigenvalue of R or Rhat at every row of (X, U)."""
    ev = model.evaluate_batch(X, U)
    E, F, G = ev.E, ev.F, ev.G
    Et, Ft, Gt = (np.swapaxes(M, 1, 2) for M in (E, F, G))
    Q, P = metric.Q, metric.P
    if model.domain == "dt":
        M = Ft @ Q @ F + Gt @ G + (P[None] - E - Et if kind == "Rhat" else -Et @ Q @ E)
    elif kind == "Rhat":
        S, D = E + F, E - F
        M = 0.5 * np.swapaxes(S, 1, 2) @ Q @ S + 0.5 * P[None] - 0.5 * (D + np.swapaxes(D, 1, 2)) + Gt @ G
    else:
        EQF = Et @ Q @ F
        M = EQF + np.swapaxes(EQF, 1, 2) + Gt @ G
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, 1, 2)))[:, -1]


# ---------------------------------------------------------------------------
# Closed form of the linear-class bound and the lemma embeddings
# ---------------------------------------------------------------------------


def bound_matrix(domain: str, E, F, G, P) -> np.ndarray:
    """Matrix ``H`` with ``Rhat-bound = w' H^{-1} w`` for linear models.

    DT: ``[[E+E'-P, F', G'], [F, P, 0], [G, 0, I]]``;
    CT: ``[[sym(E-F) - P/2, (E+F)', G'], [E+F, 2P, 0], [G, 0, I]]``.
    """
    E, F, G, P = (np.atleast_2d(np.asarray(M, float)) for M in (E, F, G, P))
    n, k = E.shape[0], G.shape[0]
    Z = np.zeros((n, k))
    if domain == "dt":
        top, lift = E + E.T - P, F
        mid = P
    else:
        D = E - F
        top, lift = 0.5 * (D + D.T) - 0.5 * P, E + F
        mid = 2 * P
    return np.block([[top, lift.T, G.T], [lift, mid, Z], [G, Z.T, np.eye(k)]])


def bound_vector(domain: str, ex, ey) -> np.ndarray:
    ex, ey = np.atleast_1d(ex), np.atleast_1d(ey)
    head = np.zeros_like(ex) if domain == "dt" else -0.5 * ex
    return np.concatenate([head, ex, ey])


def bound_quadratic_form(domain: str, E, F, G, P, ex, ey) -> float:
    """``w' H^{-1} w``; ``inf`` unless ``H`` is positive definite."""
    H = bound_matrix(domain, E, F, G, P)
    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        return math.inf
    z = sla.solve_triangular(L, bound_vector(domain, ex, ey), lower=True)
    return float(z @ z)


@dataclass(frozen=True)
class Embedding:
    E: np.ndarray
    F: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    M: np.ndarray

    @property
    def margin(self) -> float:
        return float(-np.linalg.eigvalsh(self.M).max())


def lemma_matrix(domain: str, E, F, Q, G) -> np.ndarray:
    """``F'QF + Q^-1 - E' - E + G'G`` (DT) or ``(E+F)'Q(E+F) + Q^-1 - (E-F)' - (E-F) + 2G'G`` (CT)."""
    E, F, Q, G = (np.atleast_2d(np.asarray(M, float)) for M in (E, F, Q, G))
    Qi = np.linalg.inv(Q)
    if domain == "dt":
        M = F.T @ Q @ F + Qi - E.T - E + G.T @ G
    else:
        S, D = E + F, E - F
        M = S.T @ Q @ S + Qi - D.T - D + 2 * G.T @ G
    return 0.5 * (M + M.T)


def stable_linear_embedding(A, G, domain: str = "dt", R=None) -> Embedding:
    """Implicit linear model ``(E, F, Q)`` with ``EA = F`` and negative definite lemma matrix.

    ``R`` defaults to the solution of the Lyapunov equation with right-hand
    side ``-(G'G + I)``; a caller-supplied ``R`` is used as given.
    """
    A = np.atleast_2d(np.asarray(A, float))
    G = np.atleast_2d(np.asarray(G, float))
    n = A.shape[0]
    eig = np.linalg.eigvals(A)
    if domain == "dt":
        if np.max(np.abs(eig)) >= 1:
            raise ValueError("A is not Schur stable (spectral radius >= 1)")
        if R is None:
            R = sla.solve_discrete_lyapunov(A.T, G.T @ G + np.eye(n))
        R = np.atleast_2d(np.asarray(R, float))
        E, F, Q = R, R @ A, np.linalg.inv(R)
    elif domain == "ct":
        if np.max(eig.real) >= 0:
            raise ValueError("A is not Hurwitz")
        if R is None:
            R = sla.solve_continuous_lyapunov(A.T, -(G.T @ G + np.eye(n)))
        R = np.atleast_2d(np.asarray(R, float))
        IA = np.eye(n) - A
        E, F = IA.T @ R, IA.T @ R @ A
        Q = np.linalg.inv(IA.T @ R @ IA)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    R = 0.5 * (R + R.T)
    Q = 0.5 * (Q + Q.T)
    return Embedding(E, F, Q, R, lemma_matrix(domain, E, F, Q, G))
