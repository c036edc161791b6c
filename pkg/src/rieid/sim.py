"""Simulation of implicit models, simulation-error measures and bound checks.

Discrete-time models ``e(x(t+1)) = f(x(t), u(t))`` are advanced by solving the
implicit equation at every step. When ``e`` is strongly monotone,
``(E(x) + E(x)')/2 >= r0 I``, a residual ``|e(x) - w| <= tol*r0`` guarantees
the state is within ``tol`` of the exact root, so the step contract is stated
on residuals. Continuous-time models ``d/dt e(x) = f(x, u)`` are integrated as
``x' = E(x)^-1 f(x, u)`` with fixed-step RK4.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from .data import Dataset, to_model_coordinates
from .model import ImplicitModel
from .rie import MetricMatrix, equation_errors_batch, global_rie_lower_batch, local_rie_batch

DEFAULT_TOL = 1e-9
MAX_ORACLE_CALLS = 10_000
STALL_HALVINGS = 20
DIVERGENCE_CAP = 1e9
COND_LIMIT = 1e12
SUBSTEPS = 10


class SimulationError(RuntimeError):
    """Step solver failure or an ill-conditioned continuous-time state map."""


# ---------------------------------------------------------------------------
# Implicit steps
# ---------------------------------------------------------------------------


def monotonicity_margin(model: ImplicitModel) -> float | None:
    """Certified ``r0``: the stored value, or the exact one when ``e`` is linear."""
    if model.r0 is not None:
        return float(model.r0)
    if model.e_basis.degree <= 1:
        E = model.e_jac(np.zeros((1, model.n)))[1][0]
        lam = float(np.linalg.eigvalsh(0.5 * (E + E.T)).min())
        return lam if lam > 0 else None
    return None


@dataclass(frozen=True)
class StepResult:
    x: np.ndarray
    residual: float
    calls: int
    method: str


def _residual(model: ImplicitModel, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ev, E = model.e_jac(x[None])
    return ev[0] - w, E[0]


def _ellipsoid(model, w, x0, r0, tol, calls):
    """Central-cut ellipsoid on the monotone oracle ``(z - x)'(e(x) - w) <= 0``."""
    n = x0.size
    r, _ = _residual(model, x0, w)
    calls += 1
    radius = float(np.linalg.norm(r)) / r0 * (1 + 1e-9) + 1e-300
    c = x0.copy()
    best, best_res = x0.copy(), float(np.linalg.norm(r))
    if n == 1:
        lo, hi = c[0] - radius, c[0] + radius
        while calls < MAX_ORACLE_CALLS:
            mid = np.array([0.5 * (lo + hi)])
            r, _ = _residual(model, mid, w)
            calls += 1
            nr = abs(float(r[0]))
            if nr < best_res:
                best, best_res = mid, nr
            if nr <= tol * r0:
                return best, best_res, calls
            if r[0] > 0:
                hi = mid[0]
            else:
                lo = mid[0]
        raise SimulationError("implicit step exceeded the oracle-call cap")
    A = radius**2 * np.eye(n)
    while calls < MAX_ORACLE_CALLS:
        r, _ = _residual(model, c, w)
        calls += 1
        nr = float(np.linalg.norm(r))
        if nr < best_res:
            best, best_res = c.copy(), nr
        if nr <= tol * r0:
            return best, best_res, calls
        Ag = A @ r
        gAg = float(r @ Ag)
        if gAg <= 0:
            break
        b = Ag / math.sqrt(gAg)
        c = c - b / (n + 1)
        A = n * n / (n * n - 1.0) * (A - 2.0 / (n + 1) * np.outer(b, b))
        A = 0.5 * (A + A.T)
    raise SimulationError("implicit step exceeded the oracle-call cap")


def solve_implicit_step(model: ImplicitModel, w, x_guess=None, tol: float = DEFAULT_TOL) -> StepResult:
    """Solve ``e(x) = w``, returning ``x`` with ``|e(x) - w| <= tol*r0``.

    Damped Newton with step halving; when no halving decreases the residual
    the monotone cutting-plane scheme takes over.
    """
    r0 = monotonicity_margin(model)
    if r0 is None or not r0 > 0:
        raise ValueError("implicit step needs a certified monotonicity margin r0 > 0")
    w = np.asarray(w, dtype=float).ravel()
    x = np.zeros(model.n) if x_guess is None else np.asarray(x_guess, dtype=float).ravel().copy()
    r, E = _residual(model, x, w)
    calls = 1
    nr = float(np.linalg.norm(r))
    while calls < MAX_ORACLE_CALLS:
        if nr <= tol * r0:
            return StepResult(x, nr, calls, "newton")
        try:
            dx = np.linalg.solve(E, -r)
        except np.linalg.LinAlgError:
            break
        step, improved = 1.0, False
        for _ in range(STALL_HALVINGS):
            xn = x + step * dx
            rn, En = _residual(model, xn, w)
            calls += 1
            nrn = float(np.linalg.norm(rn))
            if nrn < nr:
                x, r, E, nr, improved = xn, rn, En, nrn, True
                break
            step *= 0.5
        if not improved:
            break
    xb, res, calls = _ellipsoid(model, w, x, r0, tol, calls)
    return StepResult(xb, res, calls, "ellipsoid")


def solve_implicit_batch(model: ImplicitModel, W: np.ndarray, X0: np.ndarray, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``e(x_i) = w_i`` with vectorized Newton; stalled rows fall back to the scalar solver."""
    r0 = monotonicity_margin(model)
    if r0 is None:
        raise ValueError("implicit step needs a certified monotonicity margin r0 > 0")
    X = np.array(X0, dtype=float)
    W = np.asarray(W, dtype=float)
    ev, E = model.e_jac(X)
    R = ev - W
    nr = np.linalg.norm(R, axis=1)
    active = nr > tol * r0
    for _ in range(60):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        try:
            dX = np.linalg.solve(E[idx], -R[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        step = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(STALL_HALVINGS):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            Xn = X[idx[p]] + step[p, None] * dX[p]
            evn, En = model.e_jac(Xn)
            Rn = evn - W[idx[p]]
            nrn = np.linalg.norm(Rn, axis=1)
            ok = nrn < nr[idx[p]]
            g = idx[p[ok]]
            X[g], R[g], E[g], nr[g] = Xn[ok], Rn[ok], En[ok], nrn[ok]
            pending[p[ok]] = False
            step[p[~ok]] *= 0.5
        stalled = idx[pending]
        for i in stalled:
            out = solve_implicit_step(model, W[i], X[i], tol)
            X[i], nr[i] = out.x, out.residual
        active = nr > tol * r0
        active[stalled] = False
    for i in np.flatnonzero(nr > tol * r0):
        out = solve_implicit_step(model, W[i], X[i], tol)
        X[i], nr[i] = out.x, out.residual
    return X, nr


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    residuals: np.ndarray
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def finite(self) -> bool:
        return not self.diverged and bool(np.all(np.isfinite(self.y)))

    def to_dict(self) -> dict:
        clean = lambda a: [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {
            "t": [float(v) for v in self.t],
            "x": clean(self.x),
            "y": clean(self.y),
            "residuals": [None if not np.isfinite(v) else float(v) for v in self.residuals],
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
        }

    def save_csv(self, path) -> None:
        n, k = self.x.shape[1], self.y.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(k)] + ["residual"]
        data = np.column_stack([self.t, self.x, self.y, self.residuals])
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def _input_rows(model: ImplicitModel, u, N: int | None) -> np.ndarray:
    U = np.zeros((N or 0, 0)) if u is None else np.asarray(u, dtype=float)
    if U.ndim == 1:
        U = U[:, None] if model.m else U.reshape(-1, 0)
    if U.shape[1] != model.m:
        raise ValueError(f"input has {U.shape[1]} channels, model expects {model.m}")
    return U


def _diverging(X: np.ndarray) -> np.ndarray:
    return ~np.isfinite(X).all(axis=-1) | (np.abs(X).max(axis=-1) > DIVERGENCE_CAP)


def simulate_dt_batch(model: ImplicitModel, U: np.ndarray, X0: np.ndarray, tol: float = DEFAULT_TOL):
    """Simulate many initial states under one input. Returns states ``(B, T, n)`` and residuals ``(B, T)``."""
    U = _input_rows(model, U, None)
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    B, T = X0.shape[0], U.shape[0]
    X = np.full((B, T, model.n), np.nan)
    res = np.zeros((B, T))
    X[:, 0] = X0
    linear_e = model.e_basis.degree <= 1
    if linear_e:
        e0, E = model.e_jac(np.zeros((1, model.n)))
        E, e0 = E[0], e0[0]
        if np.linalg.cond(E) > COND_LIMIT:
            raise SimulationError("linear state map is singular")
    alive = np.ones(B, dtype=bool)
    for t in range(T - 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        W = model.f_jac(X[idx, t], np.repeat(U[t][None], idx.size, axis=0))[0]
        if linear_e:
            Xn = np.linalg.solve(E, (W - e0).T).T
            rn = np.linalg.norm(Xn @ E.T + e0 - W, axis=1)
        else:
            Xn, rn = solve_implicit_batch(model, W, X[idx, t], tol)
        X[idx, t + 1], res[idx, t + 1] = Xn, rn
        bad = _diverging(Xn)
        alive[idx[bad]] = False
    return X, res


def simulate(
    model: ImplicitModel,
    u,
    x0,
    t=None,
    *,
    tol: float = DEFAULT_TOL,
    substeps: int = SUBSTEPS,
    units: str = "model",
) -> Trajectory:
    """Simulate from ``x0`` under the input rows ``u`` sampled at times ``t``.

    ``units="raw"`` means inputs, initial state, times and returned signals are
    in the units the model's normalization maps from.
    """
    if units not in ("model", "raw"):
        raise ValueError("units must be 'model' or 'raw'")
    norm = model.normalization if units == "raw" else None
    U = _input_rows(model, u, None)
    T = U.shape[0]
    if T == 0:
        raise ValueError("empty input sequence")
    t = np.arange(1, T + 1, dtype=float) if t is None else np.asarray(t, dtype=float).ravel()
    if t.size != T:
        raise ValueError("time grid and input differ in length")
    x0 = np.asarray(x0, dtype=float).ravel()
    if norm is not None:
        U, x0, tm = norm.u(U), norm.x(x0), norm.t(t)
    else:
        tm = t
    if model.domain == "dt":
        X, res = simulate_dt_batch(model, U, x0[None], tol)
        X, res = X[0], res[0]
    else:
        X, res = _simulate_ct(model, U, x0, tm, substeps)
    bad = np.flatnonzero(_diverging(X))
    diverged_at = int(bad[0]) if bad.size else None
    Y = np.full((T, model.k), np.nan)
    ok = np.arange(T) if diverged_at is None else np.arange(diverged_at)
    if ok.size:
        Y[ok] = model.g_jac(X[ok], U[ok])[0]
    if diverged_at is not None:
        X[diverged_at:] = np.nan
    if norm is not None:
        X, Y = norm.x_raw(X), norm.y_raw(Y)
    return Trajectory(t, X, Y, res, diverged_at is not None, diverged_at)


def _ct_rate(model: ImplicitModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    ev = model.evaluate_batch(x[None], u[None])
    E = ev.E[0]
    if np.linalg.cond(E) > COND_LIMIT:
        raise SimulationError("E(x) is ill-conditioned (condition number above 1e12)")
    return np.linalg.solve(E, ev.f[0])


def _interp(t: np.ndarray, U: np.ndarray, s: float) -> np.ndarray:
    return np.array([np.interp(s, t, U[:, j]) for j in range(U.shape[1])])


def _simulate_ct(model: ImplicitModel, U, x0, t, substeps: int):
    T = t.size
    X = np.full((T, model.n), np.nan)
    X[0] = x0
    x = x0.copy()
    for i in range(T - 1):
        h = (t[i + 1] - t[i]) / substeps
        for j in range(substeps):
            s = t[i] + j * h
            u0, um, u1 = _interp(t, U, s), _interp(t, U, s + h / 2), _interp(t, U, s + h)
            k1 = _ct_rate(model, x, u0)
            k2 = _ct_rate(model, x + h / 2 * k1, um)
            k3 = _ct_rate(model, x + h / 2 * k2, um)
            k4 = _ct_rate(model, x + h * k3, u1)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if _diverging(x):
                X[i + 1] = x
                return X, np.zeros(T)
        X[i + 1] = x
    return X, np.zeros(T)


# ---------------------------------------------------------------------------
# Error measures
# ---------------------------------------------------------------------------


def _model_view(model: ImplicitModel, ds: Dataset) -> Dataset:
    if ds.domain != model.domain:
        raise ValueError(f"dataset domain {ds.domain!r} does not match model domain {model.domain!r}")
    if ds.x is None:
        raise ValueError("dataset needs an initial state")
    return to_model_coordinates(ds, model.normalization)


def _accumulate(domain: str, t: np.ndarray, sq: np.ndarray) -> float:
    if domain == "dt":
        return float(np.sum(sq))
    return float(trapezoid(sq, t)) if sq.size > 1 else 0.0


def simulated_outputs(model: ImplicitModel, ds: Dataset, tol: float = DEFAULT_TOL) -> Trajectory:
    """Simulate from the first data state under the data input; outputs in the dataset's units."""
    dsm = _model_view(model, ds)
    traj = simulate(model, dsm.u, dsm.x[0], dsm.t, tol=tol)
    if ds.normalization is None and model.normalization is not None:
        traj.y = model.normalization.y_raw(traj.y)
        traj.x = model.normalization.x_raw(traj.x)
        traj.t = ds.t
    return traj


def simulation_error(model: ImplicitModel, ds: Dataset, tol: float = DEFAULT_TOL) -> float:
    """Sum (DT) or trapezoidal integral (CT) of squared output errors; ``inf`` on divergence."""
    traj = simulated_outputs(model, ds, tol)
    if not traj.finite:
        return math.inf
    sq = np.sum((traj.y - ds.y) ** 2, axis=1)
    return _accumulate(ds.domain, ds.t, sq)


def linearized_simulation_error(model: ImplicitModel, ds: Dataset) -> float:
    """Linearized simulation error along the data (model coordinates).

    DT: ``E(v(t)) D(t+1) = F D(t) + ex(t)``; CT: ``d/dt[E(x) D] = F D + ex``
    integrated by RK4 on ``eta = E D`` with linearly interpolated data.
    Both start at ``D = 0`` and accumulate ``|G D + ey|^2``.
    """
    dsm = _model_view(model, ds)
    dsm.require_tuples()
    ex, ey = equation_errors_batch(model, dsm)
    ev = model.evaluate_batch(dsm.x, dsm.u)
    N, n = dsm.N, model.n
    D = np.zeros((N, n))
    if model.domain == "dt":
        Ev = model.e_jac(dsm.v)[1]
        for t in range(N - 1):
            D[t + 1] = np.linalg.solve(Ev[t], ev.F[t] @ D[t] + ex[t])
    else:
        D = _ct_sensitivity(model, dsm, ex)
    sq = np.sum((np.einsum("bij,bj->bi", ev.G, D) + ey) ** 2, axis=1)
    return _accumulate(model.domain, dsm.t, sq)


def _ct_sensitivity(model: ImplicitModel, ds: Dataset, ex: np.ndarray) -> np.ndarray:
    t, X, U = ds.t, ds.x, ds.u
    N, n = ds.N, model.n

    def rate(eta, xs, us, es):
        ev = model.evaluate_batch(xs[None], us[None])
        d = np.linalg.solve(ev.E[0], eta)
        return ev.F[0] @ d + es

    eta = np.zeros(n)
    D = np.zeros((N, n))
    for i in range(N - 1):
        h = t[i + 1] - t[i]
        xm, um, em = 0.5 * (X[i] + X[i + 1]), 0.5 * (U[i] + U[i + 1]), 0.5 * (ex[i] + ex[i + 1])
        k1 = rate(eta, X[i], U[i], ex[i])
        k2 = rate(eta + h / 2 * k1, xm, um, em)
        k3 = rate(eta + h / 2 * k2, xm, um, em)
        k4 = rate(eta + h * k3, X[i + 1], U[i + 1], ex[i + 1])
        eta = eta + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        D[i + 1] = np.linalg.solve(model.e_jac(X[i + 1][None])[1][0], eta)
    return D


# ---------------------------------------------------------------------------
# Incremental dissipation along homotopies of initial states
# ---------------------------------------------------------------------------


@dataclass
class DissipationTrace:
    """Storage ``V(t)`` and supply ``w(t)`` integrated over the initial-state homotopy.

    ``V(t) = int |E(x_th(t)) xi_th(t)|_Q^2 dth`` and ``w(t) = int |G xi_th(t)|^2 dth``
    where ``xi_th = dx_th/dth``; ``naive`` is ``|e(x1(t)) - e(x0(t))|_Q^2``.
    """

    V: np.ndarray
    w: np.ndarray
    dy2: np.ndarray
    naive: np.ndarray
    worst_excess: float
    scale: float


def dissipation_traces(
    model: ImplicitModel,
    metric: MetricMatrix,
    U: np.ndarray,
    x0: np.ndarray,
    x1: np.ndarray,
    nodes: int = 8,
    tol: float = DEFAULT_TOL,
) -> list[DissipationTrace]:
    """Two-trajectory storage check for DT models, batched over initial pairs.

    ``x0`` and ``x1`` hold one initial state per row. Each Gauss-Legendre
    node of the homotopy is simulated together with its tangent.
    """
    if model.domain != "dt":
        raise ValueError("the discrete storage check applies to discrete-time models")
    U = _input_rows(model, U, None)
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    P = x0.shape[0]
    th, wq = np.polynomial.legendre.leggauss(nodes)
    th, wq = 0.5 * (th + 1), 0.5 * wq
    start = (x0[:, None, :] * (1 - th)[None, :, None] + x1[:, None, :] * th[None, :, None]).reshape(-1, model.n)
    ends = np.vstack([x0, x1])
    X, _ = simulate_dt_batch(model, U, np.vstack([start, ends]), tol)
    Xh, Xe = X[: P * nodes], X[P * nodes :]
    B, T, n = Xh.shape
    Q = metric.Q
    xi = np.zeros((B, T, n))
    xi[:, 0] = np.repeat(x1 - x0, nodes, axis=0)
    Ut = np.repeat(U[None], B, axis=0)
    E = model.e_jac(Xh.reshape(-1, n))[1].reshape(B, T, n, n)
    F = model.f_jac(Xh.reshape(-1, n), Ut.reshape(-1, model.m))[1].reshape(B, T, n, n)
    G = model.g_jac(Xh.reshape(-1, n), Ut.reshape(-1, model.m))[1].reshape(B, T, model.k, n)
    for t in range(T - 1):
        xi[:, t + 1] = np.linalg.solve(E[:, t + 1], (F[:, t] @ xi[:, t][..., None]))[..., 0]
    Exi = np.einsum("btij,btj->bti", E, xi)
    Vn = np.einsum("bti,ij,btj->bt", Exi, Q, Exi).reshape(P, nodes, T)
    Gxi = np.einsum("btij,btj->bti", G, xi)
    wn = np.sum(Gxi**2, axis=2).reshape(P, nodes, T)
    V = np.einsum("j,pjt->pt", wq, Vn)
    w = np.einsum("j,pjt->pt", wq, wn)
    # per-node excess is the exact inequality; quadrature weights are positive
    excess_nodes = Vn[..., 1:] - Vn[..., :-1] + wn[..., :-1]
    X0, X1 = Xe[:P], Xe[P:]
    Y0 = model.g_jac(X0.reshape(-1, n), np.tile(U, (P, 1)))[0].reshape(P, T, -1)
    Y1 = model.g_jac(X1.reshape(-1, n), np.tile(U, (P, 1)))[0].reshape(P, T, -1)
    de = (model.e_values(X1.reshape(-1, n)) - model.e_values(X0.reshape(-1, n))).reshape(P, T, n)
    out = []
    for p in range(P):
        scale = 1.0 + float(np.nanmax(Vn[p]))
        worst = float(np.nanmax(excess_nodes[p])) if np.isfinite(excess_nodes[p]).any() else math.inf
        out.append(DissipationTrace(
            V[p], w[p], np.sum((Y1[p] - Y0[p]) ** 2, axis=1),
            np.einsum("ti,ij,tj->t", de[p], Q, de[p]), worst, scale,
        ))
    return out


# ---------------------------------------------------------------------------
# Bound ledger
# ---------------------------------------------------------------------------


@dataclass
class LedgerRow:
    name: str
    lhs: float
    rhs: float
    tol: float
    status: str  # pass | fail | inconclusive | skipped
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": _finite_or_none(self.lhs),
            "rhs": _finite_or_none(self.rhs),
            "saturated": not (math.isfinite(self.lhs) and math.isfinite(self.rhs)),
            "tol": self.tol,
            "status": self.status,
            "note": self.note,
        }


def _finite_or_none(v) -> float | None:
    return float(v) if v is not None and math.isfinite(v) else None


def _compare(name: str, lhs: float, rhs: float, rel: float = 1e-8, inconclusive: bool = False, note: str = "") -> LedgerRow:
    tol = rel * (1.0 + (abs(rhs) if math.isfinite(rhs) else 0.0))
    if math.isinf(rhs) and rhs > 0:
        return LedgerRow(name, lhs, rhs, tol, "pass", note or "bound is infinite")
    if not math.isfinite(lhs):
        return LedgerRow(name, lhs, rhs, tol, "fail", note or "left side diverged")
    ok = lhs <= rhs + tol
    status = "pass" if ok else ("inconclusive" if inconclusive else "fail")
    return LedgerRow(name, lhs, rhs, tol, status, note)


@dataclass
class SimReport:
    simulation_error: float
    linearized_error: float
    rie_local_sum: float
    rie_upper_sum: float
    rie_global_lower_sum: float | None
    ledger: list[LedgerRow]
    storage: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def all_passed(self) -> bool:
        return all(r.status in ("pass", "skipped") for r in self.ledger)

    def row(self, name: str) -> LedgerRow:
        for r in self.ledger:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        vals = {
            "simulation_error": self.simulation_error,
            "linearized_error": self.linearized_error,
            "rie_local_sum": self.rie_local_sum,
            "rie_upper_sum": self.rie_upper_sum,
            "rie_global_lower_sum": self.rie_global_lower_sum,
        }
        out = {k: _finite_or_none(v) for k, v in vals.items()}
        out["saturated"] = sorted(k for k, v in vals.items() if v is not None and not math.isfinite(v))
        out["diverged"] = self.diverged
        out["ledger"] = [r.to_dict() for r in self.ledger]
        out["storage"] = [_finite_or_none(v) for v in self.storage]
        return out

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False))


def _consecutive(ds: Dataset) -> bool:
    if ds.domain != "dt" or ds.N < 2:
        return ds.domain == "dt"
    return bool(np.allclose(ds.v[:-1], ds.x[1:], rtol=1e-12, atol=1e-12))


def verify_bounds(
    model: ImplicitModel,
    metric: MetricMatrix,
    ds: Dataset,
    *,
    pairs: int = 0,
    perturbation: float = 0.1,
    seed: int = 0,
    probes: int = 64,
    tol: float = DEFAULT_TOL,
) -> SimReport:
    """Evaluate the simulation-error bounds on ``ds`` and record each as a ledger row.

    Rows: simulation error against summed global RIE (exact for linear
    models, a probed lower estimate otherwise), linearized simulation error
    against summed local RIE, the local RIE against its convex bound, and
    (with ``pairs > 0``, DT only) the incremental storage check from random
    initial-state pairs.
    """
    dsm = _model_view(model, ds)
    dsm.require_tuples()
    ledger: list[LedgerRow] = []
    local = local_rie_batch(model, metric, dsm)
    upper = local_rie_batch(model, metric, dsm, upper=True)
    acc = lambda a: _accumulate(model.domain, dsm.t, a) if np.all(np.isfinite(a)) else math.inf
    local_sum, upper_sum = acc(local), acc(upper)
    try:
        sim = simulation_error(model, dsm, tol)
    except SimulationError as err:
        sim = math.inf
        ledger.append(LedgerRow("simulation", math.inf, math.inf, 0.0, "fail", str(err)))
    lin = linearized_simulation_error(model, dsm)
    contiguous = model.domain == "ct" or _consecutive(dsm)
    glob = None
    if not contiguous:
        ledger.append(LedgerRow("sim<=sum_global_rie", sim, math.nan, 0.0, "skipped", "samples are not consecutive"))
        ledger.append(LedgerRow("linsim<=sum_local_rie", lin, local_sum, 0.0, "skipped", "samples are not consecutive"))
    else:
        if model.is_linear():
            ledger.append(_compare("sim<=sum_global_rie", sim, local_sum, note="global equals local RIE for linear models"))
        else:
            glob = acc(global_rie_lower_batch(model, metric, dsm, probes=probes))
            ledger.append(_compare("sim<=sum_global_rie", sim, glob, inconclusive=True, note="right side is a probed lower estimate"))
        ledger.append(_compare("linsim<=sum_local_rie", lin, local_sum))
    ledger.append(_compare("local<=upper", local_sum, upper_sum))
    storage: list[float] = []
    if pairs > 0:
        if model.domain != "dt":
            ledger.append(LedgerRow("dissipation", math.nan, math.nan, 0.0, "skipped", "discrete storage check only"))
        else:
            rng = np.random.default_rng(seed)
            x0 = np.repeat(dsm.x[:1], pairs, axis=0)
            scale = perturbation * (1.0 + float(np.max(np.abs(dsm.x))))
            x1 = x0 + scale * rng.standard_normal(x0.shape)
            try:
                traces = dissipation_traces(model, metric, dsm.u, x0, x1, tol=tol)
                worst = max(tr.worst_excess / tr.scale for tr in traces)
                ledger.append(_compare("dissipation", worst, 0.0, note="max over steps of (V(t+1)-V(t)+w(t))/scale"))
                summ = max(float(np.sum(tr.dy2) - tr.V[0]) / tr.scale for tr in traces)
                ledger.append(_compare("output_increments<=V(1)", summ, 0.0, rel=1e-6, note="sum |y1-y0|^2 - V(1), scaled"))
                storage = [float(v) for v in traces[0].V]
            except SimulationError as err:
                ledger.append(LedgerRow("dissipation", math.inf, 0.0, 0.0, "fail", str(err)))
    return SimReport(sim, lin, local_sum, upper_sum, glob, ledger, storage, not math.isfinite(sim))


def well_posedness_probe(model: ImplicitModel, count: int = 1000, radius: float = 3.0, seed: int = 0) -> float:
    """Smallest ``|e(x+D) - e(x)| - r0 |D|`` over random probes (should be >= 0)."""
    r0 = monotonicity_margin(model)
    if r0 is None:
        raise ValueError("model carries no monotonicity margin")
    rng = np.random.default_rng(seed)
    X = radius * rng.uniform(-1, 1, size=(count, model.n))
    D = radius * rng.uniform(-1, 1, size=(count, model.n)) * rng.uniform(0, 1, size=(count, 1)) ** 2
    gap = np.linalg.norm(model.e_values(X + D) - model.e_values(X), axis=1) - r0 * np.linalg.norm(D, axis=1)
    return float(gap.min())


__all__: Sequence[str] = (
    "DEFAULT_TOL", "DissipationTrace", "LedgerRow", "SimReport", "SimulationError", "StepResult", "Trajectory",
    "dissipation_traces", "linearized_simulation_error", "monotonicity_margin", "simulate", "simulate_dt_batch",
    "simulated_outputs", "simulation_error", "solve_implicit_batch", "solve_implicit_step", "verify_bounds",
    "well_posedness_probe",
)
