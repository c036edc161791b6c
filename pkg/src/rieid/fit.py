"""High-level fitting: model-class construction, program choice, extraction and reporting."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DataError, Dataset, normalize
from .model import DegreeError, ImplicitModel, ModelClass, MonomialBasis, Normalization, build_basis
from .rie import MetricMatrix, max_eig_batch
from .sdp import (
    FitOptions,
    Solution,
    assemble_equation_error,
    assemble_global,
    assemble_local,
    compress_linear,
    extract_model,
    solve,
)

OBJECTIVES = ("local-rie", "global-rie", "eqerr", "eqerr+rie-finite")
G_MODES = ("linear", "select")


@dataclass(frozen=True)
class FitConfig:
    """Everything that determines a fit.

    Degrees: ``e`` spans x-monomials of total degree 1..``deg_e``; ``f`` spans
    monomials with each state to degree ``deg_x``, the inputs to total degree
    ``deg_u`` and everything to total degree ``total_deg_f`` (default
    ``max(deg_x, deg_u)``; no x-u products unless ``cross``). ``g_mode="select"`` fixes ``y = x[:k]``.
    """

    domain: str = "dt"
    deg_x: int = 1
    deg_u: int = 1
    deg_e: int | None = None
    total_deg_f: int | None = None
    cross: bool = False
    affine: bool = True
    d_x: int = 0
    d_u: int = 0
    g_mode: str = "linear"
    objective: str = "local-rie"
    r0: float | None = None
    monotone: str = "per-sample"
    stability: str = "off"
    margin: float = 1e-6
    solver: str | None = None
    accuracy: str = "default"
    seed: int = 0
    normalize: bool = True
    compress: bool = False

    def __post_init__(self):
        if self.domain not in ("dt", "ct"):
            raise ValueError("domain must be 'dt' or 'ct'")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.g_mode not in G_MODES:
            raise ValueError(f"g_mode must be one of {G_MODES}")
        for name in ("deg_x", "deg_u", "d_x", "d_u"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.domain == "dt" and (self.d_x or self.d_u):
            raise DegreeError("rational denominators are only used in continuous time")
        if self.compress and self.objective != "local-rie":
            raise ValueError("compression applies to the local-RIE objective")
        # validates monotone/stability/r0/margin
        self.options()

    @property
    def e_degree(self) -> int:
        return self.deg_x if self.deg_e is None else self.deg_e

    def options(self, metric: MetricMatrix | None = None) -> FitOptions:
        return FitOptions(r0=self.r0, monotone=self.monotone, stability=self.stability, metric=metric, margin=self.margin)

    def to_dict(self) -> dict:
        return asdict(self)


def _selection_coefficients(basis: MonomialBasis, k: int, norm: Normalization | None) -> np.ndarray:
    """``y = x[:k]`` expressed in model coordinates on ``basis`` (linear terms plus constant)."""
    n = basis.n
    index = {tuple(int(a) for a in e): j for j, e in enumerate(basis.exps)}
    C = np.zeros((k, len(basis)))
    xs, ys = (1.0, 1.0) if norm is None else (norm.x_scale, norm.y_scale)
    shift = np.zeros(k) if norm is None else (norm.x_offset[:k] - norm.y_offset) / norm.y_scale
    for i in range(k):
        C[i, index[tuple(np.eye(n + basis.m, dtype=int)[i])]] = xs / ys
    const = tuple([0] * (n + basis.m))
    if np.any(shift != 0):
        if const not in index:
            raise DegreeError("fixed output map needs a constant term")
        C[:, index[const]] = shift
    return C


def build_class(cfg: FitConfig, n: int, m: int, k: int, norm: Normalization | None = None) -> ModelClass:
    """Model class of ``cfg`` for data with ``n`` states, ``m`` inputs and ``k`` outputs."""
    eb = build_basis(n, m, x_degree=cfg.e_degree, u_degree=0, min_degree=1)
    total = cfg.total_deg_f if cfg.total_deg_f is not None else max(cfg.deg_x, cfg.deg_u)
    fb = build_basis(n, m, per_x=cfg.deg_x, u_degree=cfg.deg_u, total=total, cross=cfg.cross,
                     min_degree=0 if cfg.affine else 1)
    if cfg.g_mode == "select":
        if k > n:
            raise DataError("cannot select more outputs than states")
        gb = build_basis(n, m, x_degree=1, u_degree=0, min_degree=0)
        fixed = {"g": _selection_coefficients(gb, k, norm)}
    else:
        gb = build_basis(n, m, total=1, min_degree=0 if cfg.affine else 1)
        fixed = {}
    return ModelClass(cfg.domain, n, m, k, eb, fb, gb, d_x=cfg.d_x, d_u=cfg.d_u, fixed=fixed)


@dataclass
class FitResult:
    model: ImplicitModel | None  # None when the solver failed
    metric: MetricMatrix | None
    solution: Solution
    report: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.solution.ok


def fit(ds: Dataset, cfg: FitConfig, cls: ModelClass | None = None) -> FitResult:
    """Assemble the program selected by ``cfg``, solve it and extract the model.

    Raw data are normalized first when ``cfg.normalize``; the returned model
    carries the normalization, so it simulates in either set of units.
    """
    if ds.domain != cfg.domain:
        raise DataError(f"dataset domain {ds.domain!r} does not match config domain {cfg.domain!r}")
    if ds.N == 0:
        raise DataError("empty dataset")
    ds.require_tuples()
    norm = ds.normalization
    work = ds
    if cfg.normalize and ds.normalization is None:
        work, _ = normalize(ds)
        norm = work.normalization
    if cls is None:
        cls = build_class(cfg, work.n, work.m, work.k, norm)
    opts = cfg.options()
    t0 = time.perf_counter()
    if cfg.objective == "local-rie":
        prog = compress_linear(cls, work, opts) if cfg.compress else assemble_local(cls, work, opts)
    elif cfg.objective == "global-rie":
        prog = assemble_global(cls, work, opts)
    else:
        prog = assemble_equation_error(cls, work, opts, finite=cfg.objective == "eqerr+rie-finite")
    t1 = time.perf_counter()
    sol = solve(prog, solver=cfg.solver, accuracy=cfg.accuracy)
    t2 = time.perf_counter()
    report = {
        "config": cfg.to_dict(),
        "status": sol.status,
        "objective": sol.objective if sol.ok else None,
        "solver": sol.diagnostics,
        "program": {"psd_blocks": prog.count("psd"), "variables": prog.nvars},
        "timing": {"assemble_s": t1 - t0, "solve_s": t2 - t1},
        "samples": work.N,
    }
    if not sol.ok:
        return FitResult(None, None, sol, report)
    model, metric = extract_model(sol, cls, norm)
    if metric is not None:
        eig = max_eig_batch(model, metric, work.x, work.u, "Rhat")
        report["robustness"] = {
            "max_eig_Rhat": float(eig.max()),
            "samples_negative": int(np.sum(eig < 0)),
            "per_sample": [float(v) for v in eig],
        }
        report["metric"] = metric.to_dict()
    return FitResult(model, metric, sol, report)
