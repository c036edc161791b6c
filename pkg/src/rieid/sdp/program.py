"""Solver-agnostic conic programs and their solution through cvxpy."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from .affine import Affine

SOLVER_ENV = "RIEID_SOLVER"
SOLVERS = ("clarabel", "cvxopt", "scs")
STATUSES = ("optimal", "infeasible", "numerical-failure")


class SolverError(RuntimeError):
    """A solve did not produce a usable optimum."""

    def __init__(self, solution: "Solution"):
        self.solution = solution
        super().__init__(f"solver returned {solution.status}: {solution.diagnostics.get('message', '')}")


@dataclass(frozen=True)
class VarInfo:
    name: str
    start: int
    size: int
    shape: tuple[int, int]
    symmetric: bool = False


@dataclass
class Constraint:
    kind: str  # "psd" | "eq" | "nonneg" | "soc"
    expr: Affine
    label: str = ""
    head: Affine | None = None  # soc: |expr| <= head


def _sym_index(r: int) -> np.ndarray:
    """Decision index of each entry of a symmetric matrix stored as its upper triangle."""
    index = np.zeros((r, r), dtype=int)
    index[np.triu_indices(r)] = np.arange(r * (r + 1) // 2)
    return np.triu(index) + np.triu(index, 1).T


class ConicProgram:
    """Decision-variable catalog plus affine PSD/SOC/linear constraints.

    The objective is linear (an affine scalar) and always minimized.
    """

    def __init__(self):
        self.nvars = 0
        self.catalog: dict[str, VarInfo] = {}
        self.constraints: list[Constraint] = []
        self.objective: Affine = Affine(np.zeros((1, 1)))
        self.meta: dict[str, Any] = {}

    # -- variables ----------------------------------------------------------

    def add_variable(self, name: str, shape, symmetric: bool = False) -> Affine:
        if name in self.catalog:
            raise ValueError(f"variable {name!r} already declared")
        shape = (int(shape[0]), int(shape[1])) if not np.isscalar(shape) else (int(shape), 1)
        r, c = shape
        if symmetric:
            if r != c:
                raise ValueError("symmetric variables must be square")
            index = _sym_index(r)
            size = r * (r + 1) // 2
        else:
            index = np.arange(r * c).reshape(r, c)
            size = r * c
        info = VarInfo(name, self.nvars, size, shape, symmetric)
        self.catalog[name] = info
        self.nvars += size
        if size == 0:
            return Affine(np.zeros(shape))
        return Affine.variable(info.start, shape, index)

    def var(self, name: str) -> Affine:
        """Affine view of a declared variable."""
        info = self.catalog[name]
        r, c = info.shape
        index = _sym_index(r) if info.symmetric else np.arange(r * c).reshape(r, c)
        return Affine.variable(info.start, info.shape, index)

    # -- constraints ----------------------------------------------------------

    def add_psd(self, expr: Affine, label: str = "") -> None:
        r, c = expr.shape
        if r != c:
            raise ValueError("PSD block must be square")
        self.constraints.append(Constraint("psd", expr.sym(), label))

    def add_eq(self, expr: Affine, label: str = "") -> None:
        self.constraints.append(Constraint("eq", expr.reshape((-1, 1)), label))

    def add_nonneg(self, expr: Affine, label: str = "") -> None:
        self.constraints.append(Constraint("nonneg", expr.reshape((-1, 1)), label))

    def add_soc(self, head: Affine, vec: Affine, label: str = "") -> None:
        """``|vec| <= head`` with ``head`` a scalar."""
        if head.shape != (1, 1):
            raise ValueError("SOC head must be scalar")
        self.constraints.append(Constraint("soc", vec.reshape((-1, 1)), label, head))

    def minimize(self, expr: Affine) -> None:
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self.objective = expr

    def count(self, kind: str, label: str | None = None) -> int:
        return sum(1 for c in self.constraints if c.kind == kind and (label is None or c.label == label))

    def check(self) -> None:
        for c in self.constraints:
            for e in (c.expr, c.head):
                if e is not None and e.nvars > self.nvars:
                    raise ValueError(f"constraint {c.label!r} references undeclared variables")
        if self.objective.nvars > self.nvars:
            raise ValueError("objective references undeclared variables")

    # -- export ----------------------------------------------------------------

    def to_sdpa(self, path) -> None:
        """Write the program in sparse SDPA format.

        Equalities become pairs of inequalities and second-order cones their
        arrow-matrix LMIs, so the export is exact but not minimal.
        """
        self.check()
        blocks: list[Affine] = []
        lp: list[Affine] = []
        for c in self.constraints:
            if c.kind == "psd":
                blocks.append(c.expr)
            elif c.kind == "nonneg":
                lp.append(c.expr)
            elif c.kind == "eq":
                lp.extend([c.expr, -c.expr])
            else:
                d = c.expr.shape[0]
                blocks.append(Affine.bmat([[c.head, c.expr.T], [c.expr, _diag_of(c.head, d)]]))
        lines = [f"* exported conic program: {self.nvars} variables", str(self.nvars)]
        nblocks = len(blocks) + (1 if lp else 0)
        lines.append(str(nblocks))
        sizes = [str(b.shape[0]) for b in blocks]
        lpvec = Affine.vstack(lp) if lp else None
        if lpvec is not None:
            sizes.append(str(-lpvec.shape[0]))
        lines.append(" ".join(sizes))
        obj = np.asarray(self.objective.coef.todense()).ravel()
        obj = np.concatenate([obj, np.zeros(self.nvars - obj.size)])
        # SDPA form: minimize c'x subject to sum_i F_i x_i - F_0 >= 0 (constant offset dropped)
        lines.append(" ".join(repr(float(v)) for v in obj))

        def emit(bi: int, A: Affine, diag: bool):
            n = A.shape[0]
            C = A.coef.tocsc()
            for i in range(n):
                for j in range(i, n) if not diag else (i,):
                    k = i * (1 if diag else n) + (0 if diag else j)
                    val = A.const.ravel()[k]
                    if val != 0.0:
                        lines.append(f"0 {bi} {i + 1} {j + 1} {-val!r}")
            Cc = C.tocoo()
            for r_, var, val in zip(Cc.row, Cc.col, Cc.data):
                if diag:
                    i = j = int(r_)
                else:
                    i, j = divmod(int(r_), n)
                    if j < i:
                        continue
                if val != 0.0:
                    lines.append(f"{var + 1} {bi} {i + 1} {j + 1} {float(val)!r}")

        for bi, B in enumerate(blocks, start=1):
            emit(bi, B, diag=False)
        if lpvec is not None:
            emit(len(blocks) + 1, lpvec, diag=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _diag_of(head: Affine, d: int) -> Affine:
    return Affine.bmat([[head if i == j else None for j in range(d)] for i in range(d)])


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float | None
    diagnostics: dict = field(default_factory=dict)
    catalog: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def value(self, name: str) -> np.ndarray:
        if self.x is None:
            raise SolverError(self)
        info: VarInfo = self.catalog[name]
        seg = self.x[info.start : info.start + info.size]
        r, c = info.shape
        if info.symmetric:
            M = np.zeros((r, r))
            M[np.triu_indices(r)] = seg
            return M + np.triu(M, 1).T
        return seg.reshape(r, c)


def default_solver() -> str:
    name = os.environ.get(SOLVER_ENV, "clarabel").strip().lower()
    if name not in SOLVERS:
        raise ValueError(f"{SOLVER_ENV}={name!r} is not one of {SOLVERS}")
    return name


def _settings(solver: str, accuracy: str) -> dict:
    if solver == "clarabel":
        if accuracy == "high":
            return {"tol_gap_abs": 1e-11, "tol_gap_rel": 1e-11, "tol_feas": 1e-11, "tol_ktratio": 1e-9, "max_iter": 400}
        return {"max_iter": 300}
    if solver == "cvxopt":
        if accuracy == "high":
            return {"abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-10, "max_iters": 300}
        return {"max_iters": 200}
    return {"eps": 1e-9 if accuracy == "high" else 1e-6, "max_iters": 200000}


def block_violation(program: ConicProgram, x: np.ndarray) -> float:
    """Largest relative constraint violation at ``x``."""
    worst = 0.0
    for c in program.constraints:
        val = c.expr.value(x)
        if c.kind == "psd":
            S = 0.5 * (val + val.T)
            lam = np.linalg.eigvalsh(S)[0]
            worst = max(worst, -lam / (1.0 + np.abs(S).max()))
        elif c.kind == "eq":
            worst = max(worst, np.abs(val).max(initial=0.0) / (1.0 + np.abs(c.expr.const).max(initial=0.0)))
        elif c.kind == "nonneg":
            worst = max(worst, -val.min(initial=0.0) / (1.0 + np.abs(val).max(initial=0.0)))
        else:
            h = float(c.head.value(x)[0, 0])
            nv = float(np.linalg.norm(val))
            worst = max(worst, (nv - h) / (1.0 + abs(h)))
    return float(worst)


def solve(
    program: ConicProgram,
    solver: str | None = None,
    accuracy: str = "default",
    verbose: bool = False,
    check_tol: float = 1e-6,
) -> Solution:
    """Solve ``program`` with a cvxpy back-end.

    ``optimal_inaccurate`` results are accepted only when every constraint
    holds to ``check_tol`` (relative) at the returned point.
    """
    import cvxpy as cp

    solver = solver or default_solver()
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    program.check()
    n = program.nvars
    if n == 0:
        # constant program: nothing to optimize, only feasibility to check
        x0 = np.zeros(0)
        viol = block_violation(program, x0)
        diag = {"solver": "none", "variables": 0, "constraints": len(program.constraints), "max_violation": viol}
        if viol > check_tol:
            return Solution("infeasible", None, None, diag, dict(program.catalog), dict(program.meta))
        obj = float(program.objective.value(x0)[0, 0])
        return Solution("optimal", x0, obj, diag, dict(program.catalog), dict(program.meta))
    x = cp.Variable(n)
    cons = []

    def lin(A: Affine):
        coef = A.coef if A.nvars == n else sp.csr_matrix((A.coef.data, A.coef.indices, A.coef.indptr), shape=(A.coef.shape[0], n))
        return coef @ x + A.const.ravel()

    for c in program.constraints:
        if c.kind == "psd":
            d = c.expr.shape[0]
            cons.append(cp.reshape(lin(c.expr), (d, d), order="C") >> 0)
        elif c.kind == "eq":
            cons.append(lin(c.expr) == 0)
        elif c.kind == "nonneg":
            cons.append(lin(c.expr) >= 0)
        else:
            cons.append(cp.SOC(lin(c.head)[0], lin(c.expr)))
    objective = cp.Minimize(lin(program.objective)[0])
    prob = cp.Problem(objective, cons)
    t0 = time.perf_counter()
    diag: dict[str, Any] = {"solver": solver, "variables": n, "constraints": len(program.constraints)}
    try:
        prob.solve(solver={"clarabel": cp.CLARABEL, "cvxopt": cp.CVXOPT, "scs": cp.SCS}[solver], verbose=verbose, **_settings(solver, accuracy))
    except cp.error.SolverError as exc:
        diag.update(message=str(exc), seconds=time.perf_counter() - t0)
        return Solution("numerical-failure", None, None, diag, dict(program.catalog), dict(program.meta))
    diag["seconds"] = time.perf_counter() - t0
    diag["raw_status"] = prob.status
    try:
        diag["iterations"] = prob.solver_stats.num_iters
    except Exception:  # stats are optional across back-ends
        pass
    xv = None if x.value is None else np.asarray(x.value, dtype=float)
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        diag["message"] = "primal infeasible"
        return Solution("infeasible", None, None, diag, dict(program.catalog), dict(program.meta))
    if xv is None or prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        diag["message"] = f"no primal point ({prob.status})"
        return Solution("numerical-failure", None, None, diag, dict(program.catalog), dict(program.meta))
    viol = block_violation(program, xv)
    diag["max_violation"] = viol
    status = "optimal"
    if prob.status == cp.OPTIMAL_INACCURATE:
        diag["message"] = "inaccurate optimum"
        if viol > check_tol:
            status = "numerical-failure"
    obj = float(program.objective.value(xv)[0, 0])
    return Solution(status, xv, obj, diag, dict(program.catalog), dict(program.meta))
