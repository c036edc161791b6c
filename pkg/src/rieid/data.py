"""Sampled input/state/output records and their preprocessing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import signal

from .model import Normalization


class DataError(ValueError):
    """Malformed or unsuitable data; ``rows`` names offending sample indices."""

    def __init__(self, message: str, rows: Sequence[int] = ()):
        self.rows = list(rows)
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:10])
            message = f"{message} (rows {shown}{', ...' if len(self.rows) > 10 else ''})"
        super().__init__(message)


@dataclass(frozen=True)
class SampleTuple:
    v: np.ndarray | None
    x: np.ndarray | None
    u: np.ndarray
    y: np.ndarray
    t: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered samples ``(v, x, u, y)`` with their time stamps.

    ``v`` is the state successor in discrete time and the state rate in
    continuous time; ``x`` and ``v`` may be absent before preprocessing.
    """

    domain: str
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    x: np.ndarray | None = None
    v: np.ndarray | None = None
    normalization: Normalization | None = None
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in ("dt", "ct"):
            raise ValueError(f"unknown domain {self.domain!r}")
        t = np.asarray(self.t, dtype=float).ravel()
        N = t.size
        if N < 1:
            raise DataError("dataset is empty")
        object.__setattr__(self, "t", t)
        for name in ("u", "y", "x", "v"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=float)
            if a.size == 0:
                a = np.zeros((N, 0))
            elif a.ndim == 1 and a.size == N:
                a = a[:, None]
            if a.ndim != 2 or a.shape[0] != N:
                raise DataError(f"{name} has {a.shape[0]} rows, expected {N}")
            object.__setattr__(self, name, a)
        if self.v is not None and (self.x is None or self.v.shape != self.x.shape):
            raise DataError("v requires x of the same shape")
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def N(self) -> int:
        return self.t.size

    def __len__(self) -> int:
        return self.N

    @property
    def n(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    @property
    def dt(self) -> float | None:
        """Uniform sampling interval, or None when sampling is irregular."""
        if self.N < 2:
            return None
        d = np.diff(self.t)
        if np.allclose(d, d[0], rtol=1e-9, atol=1e-12 * abs(d[0])):
            return float(d[0])
        return None

    def samples(self) -> Iterator[SampleTuple]:
        for i in range(self.N):
            yield SampleTuple(
                None if self.v is None else self.v[i],
                None if self.x is None else self.x[i],
                self.u[i], self.y[i], float(self.t[i]),
            )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return replace(self, t=self.t[idx], u=self.u[idx], y=self.y[idx], x=pick(self.x), v=pick(self.v))

    def with_(self, **changes) -> "Dataset":
        return replace(self, **changes)

    def require_tuples(self) -> None:
        if self.x is None or self.v is None:
            raise DataError("dataset needs state samples x and successors/rates v")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

_GROUPS = ("x", "v", "u", "y")


def _default_columns(header: Sequence[str]) -> dict[str, list[str]]:
    cols: dict[str, list[str]] = {g: [] for g in _GROUPS}
    for h in header:
        name = h.strip()
        if name[:1] in cols and name[1:].isdigit():
            cols[name[0]].append(name)
    for g in cols:
        cols[g].sort(key=lambda c: int(c[1:]))
    return cols


def load_csv(path, column_map: Mapping[str, Sequence[str]] | None = None, domain: str = "dt") -> Dataset:
    """Read a header-row CSV with columns ``t, u1.., y1.. [, x1.., v1..]``.

    ``column_map`` may rename groups, e.g. ``{"t": ["time"], "y": ["Vm"]}``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    ragged = [i for i, r in enumerate(body) if len(r) != len(header)]
    if ragged:
        raise DataError("ragged rows", ragged)
    if not body:
        raise DataError("dataset is empty")
    cols = _default_columns(header)
    cols["t"] = ["t"]
    if column_map:
        for g, names in column_map.items():
            cols[g] = [names] if isinstance(names, str) else list(names)
    index = {h: i for i, h in enumerate(header)}
    missing = [c for g in cols for c in cols[g] if c not in index]
    if missing:
        raise DataError(f"columns not found: {missing}")
    try:
        table = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise DataError(f"non-numeric entry: {exc}") from None

    def take(g):
        return table[:, [index[c] for c in cols[g]]] if cols[g] else None

    t = take("t").ravel()
    bad = np.nonzero(np.diff(t) <= 0)[0] + 1
    if bad.size:
        raise DataError("time stamps must be strictly increasing", bad.tolist())
    N = t.size
    u = take("u")
    return Dataset(
        domain, t,
        u if u is not None else np.zeros((N, 0)),
        take("y") if cols["y"] else np.zeros((N, 0)),
        x=take("x"), v=take("v") if cols["x"] else None,
    )


def save_csv(ds: Dataset, path, meta: Mapping | None = None) -> None:
    """Write ``ds`` as CSV; ``meta`` (if given) goes to ``<path>.meta.json``."""
    names, blocks = ["t"], [ds.t[:, None]]
    for g in _GROUPS:
        a = getattr(ds, g)
        if a is not None and a.shape[1]:
            names += [f"{g}{i + 1}" for i in range(a.shape[1])]
            blocks.append(a)
    table = np.hstack(blocks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(c)) for c in row])
    if meta is not None:
        side = dict(meta)
        if ds.normalization is not None:
            side.setdefault("normalization", ds.normalization.to_dict())
        Path(str(path) + ".meta.json").write_text(json.dumps(side, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# Discrete-time pairing
# ---------------------------------------------------------------------------


def dt_pair_states(ds: Dataset) -> Dataset:
    """Attach successors: tuple ``t`` gets ``v(t) = x(t+1)``; the last sample is dropped."""
    if ds.domain != "dt":
        raise DataError("state pairing applies to discrete-time data")
    if ds.x is None:
        raise DataError("dataset has no state samples")
    if ds.N < 2:
        raise DataError("need at least two samples to pair states")
    head = ds.subset(np.arange(ds.N - 1))
    return head.with_(v=ds.x[1:].copy())


# ---------------------------------------------------------------------------
# Laguerre filter bank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterBankSpec:
    pole: float  # rad/s
    count: int
    method: str = "bilinear"
    rate: float | None = None  # Hz; taken from the data when None

    def __post_init__(self):
        if not self.pole > 0:
            raise ValueError("Laguerre pole must be positive")
        if self.count < 1:
            raise ValueError("need at least one Laguerre function")
        if self.method != "bilinear":
            raise ValueError(f"unsupported discretization {self.method!r}")


def laguerre_realization(pole: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    """CT state-space ``z' = A z + b y`` whose states are the Laguerre outputs.

    ``z_j = sqrt(2a) (s - a)^j / (s + a)^(j+1) y``; the rows follow from
    ``(s + a) z_j = (s - a) z_{j-1}``.
    """
    a = float(pole)
    A = np.zeros((count, count))
    b = np.zeros(count)
    A[0, 0] = -a
    b[0] = math.sqrt(2 * a)
    for j in range(1, count):
        A[j] = A[j - 1]
        A[j, j - 1] -= a
        A[j, j] -= a
        b[j] = b[j - 1]
    return A, b


def laguerre_transfer(pole: float, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Numerator/denominator (descending powers of s) of the j-th Laguerre function."""
    num = math.sqrt(2 * pole) * np.poly1d([1.0, -pole]) ** j
    den = np.poly1d([1.0, pole]) ** (j + 1)
    return np.atleast_1d(num.coeffs), den.coeffs


def laguerre_states(y: np.ndarray, spec: FilterBankSpec, dt: float | None = None) -> np.ndarray:
    """Filter every output channel through the bank (zero initial state).

    Returns an array of shape (N, k * count) ordered channel-major:
    ``[L0 y1, L1 y1, ..., L0 y2, ...]``.
    """
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    fs = spec.rate if spec.rate is not None else (None if dt is None else 1.0 / dt)
    if fs is None:
        raise DataError("Laguerre filtering needs uniformly sampled data")
    out = []
    filters = [signal.bilinear(*laguerre_transfer(spec.pole, j), fs=fs) for j in range(spec.count)]
    for c in range(y.shape[1]):
        for bz, az in filters:
            out.append(signal.lfilter(bz, az, y[:, c]))
    return np.column_stack(out) if out else np.zeros((y.shape[0], 0))


def laguerre_rates(y: np.ndarray, z: np.ndarray, spec: FilterBankSpec) -> np.ndarray:
    """Analytic rates ``A z + b y`` of the Laguerre channels returned by :func:`laguerre_states`."""
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    A, b = laguerre_realization(spec.pole, spec.count)
    c = spec.count
    rates = [z[:, i * c : (i + 1) * c] @ A.T + y[:, [i]] * b[None, :] for i in range(y.shape[1])]
    return np.hstack(rates)


def add_laguerre_states(ds: Dataset, spec: FilterBankSpec, smoothing: float | None = None) -> Dataset:
    """States ``x = [y, Laguerre(y)]``; in CT also rates ``v`` for every state.

    Output rates come from :func:`smooth_differentiate` (cutoff ``smoothing``
    in rad/s), filter rates from the bank's own realization.
    """
    dt = ds.dt
    if dt is None:
        raise DataError("Laguerre filtering needs uniformly sampled data")
    z = laguerre_states(ds.y, spec, dt)
    x = np.hstack([ds.y, z])
    meta = dict(ds.meta)
    meta["laguerre"] = {"pole": spec.pole, "count": spec.count, "method": spec.method, "rate": 1.0 / dt}
    if ds.domain == "dt":
        return ds.with_(x=x, v=None, meta=meta)
    vy = smooth_differentiate(ds.y, dt, smoothing)
    v = np.hstack([vy, laguerre_rates(ds.y, z, spec)])
    meta["smoothing"] = smoothing
    return ds.with_(x=x, v=v, meta=meta)


def drop_warmup(ds: Dataset, duration: float) -> Dataset:
    """Discard samples within ``duration`` of the first time stamp."""
    keep = ds.t >= ds.t[0] + duration - 1e-12 * max(1.0, abs(duration))
    return ds.subset(np.nonzero(keep)[0])


def warmup_duration(spec: FilterBankSpec, time_constants: float = 5.0) -> float:
    return time_constants / spec.pole


# ---------------------------------------------------------------------------
# Smoothing differentiation
# ---------------------------------------------------------------------------


def smooth_differentiate(sig: np.ndarray, dt: float, cutoff: float | None = None) -> np.ndarray:
    """Zero-phase first-order low-pass (cutoff in rad/s), then central differences.

    The linear trend of each channel bypasses the filter, so ramps are
    differentiated exactly; endpoints use one-sided differences.
    """
    sig = np.asarray(sig, dtype=float)
    flat = sig.ndim == 1
    s = sig[:, None] if flat else sig
    N = s.shape[0]
    if N < 3:
        raise DataError("smoothing differentiation needs at least 3 samples")
    if cutoff is not None:
        nyq = math.pi / dt
        if not 0 < cutoff < nyq:
            raise ValueError(f"cutoff must lie in (0, {nyq:g}) rad/s")
        b, a = signal.butter(1, cutoff / nyq)
        tt = np.arange(N) * dt
        trend = np.polynomial.polynomial.polyfit(tt, s, 1)
        fit = trend[0][None, :] + tt[:, None] * trend[1][None, :]
        s = fit + signal.filtfilt(b, a, s - fit, axis=0, method="gust")
    d = np.gradient(s, dt, axis=0, edge_order=1)
    return d[:, 0] if flat else d


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _center_scale(a: np.ndarray | None) -> tuple[np.ndarray, float]:
    if a is None or a.shape[1] == 0:
        return np.zeros(0 if a is None else a.shape[1]), 1.0
    off = a.mean(axis=0)
    r = float(np.max(np.linalg.norm(a - off, axis=1)))
    return off, (r if r > 0 else 1.0)


def compose(first: Normalization, second: Normalization) -> Normalization:
    """Normalization equal to applying ``first`` and then ``second``."""
    return Normalization(
        first.x_offset + first.x_scale * second.x_offset, first.x_scale * second.x_scale,
        first.u_offset + first.u_scale * second.u_offset, first.u_scale * second.u_scale,
        first.y_offset + first.y_scale * second.y_offset, first.y_scale * second.y_scale,
        first.time_scale * second.time_scale,
    )


def normalize(ds: Dataset, *, rescale_time: bool = True) -> tuple[Dataset, Normalization]:
    """Center every channel and scale each signal group into the unit ball.

    For continuous-time data with rates the clock is rescaled as well so the
    rates also lie in the unit ball. Returns the transformed dataset and the
    record of this step alone; the dataset carries the composed record.
    """
    xo, xs = _center_scale(ds.x)
    uo, us = _center_scale(ds.u)
    yo, ys = _center_scale(ds.y)
    ts = 1.0
    if ds.domain == "ct" and ds.v is not None and rescale_time:
        r = float(np.max(np.linalg.norm(ds.v, axis=1))) / xs
        ts = 1.0 / r if r > 0 else 1.0
    rec = Normalization(xo, xs, uo, us, yo, ys, ts)
    x = None if ds.x is None else rec.x(ds.x)
    v = None if ds.v is None else rec.v(ds.v, ds.domain)
    total = rec if ds.normalization is None else compose(ds.normalization, rec)
    out = ds.with_(t=rec.t(ds.t), u=rec.u(ds.u), y=rec.y(ds.y), x=x, v=v, normalization=total)
    return out, rec


def to_model_coordinates(ds: Dataset, norm: Normalization | None) -> Dataset:
    """Express ``ds`` in the coordinates described by ``norm``.

    Raw data (no record) is transformed; data already carrying the same
    record passes through unchanged.
    """
    if norm is None:
        if ds.normalization is not None:
            raise DataError("dataset is normalized but the model is not")
        return ds
    if ds.normalization is not None:
        if norm.same_as(ds.normalization):
            return ds
        raise DataError("dataset and model use different normalizations")
    return ds.with_(
        t=norm.t(ds.t), u=norm.u(ds.u), y=norm.y(ds.y),
        x=None if ds.x is None else norm.x(ds.x),
        v=None if ds.v is None else norm.v(ds.v, ds.domain),
        normalization=norm,
    )


# ---------------------------------------------------------------------------
# Spread subsampling
# ---------------------------------------------------------------------------


def spread_features(ds: Dataset) -> np.ndarray:
    parts = [a for a in (ds.x, ds.v, ds.u) if a is not None and a.shape[1]]
    if not parts:
        raise DataError("nothing to spread over")
    Z = np.hstack(parts)
    sd = Z.std(axis=0)
    sd[sd == 0] = 1.0
    return (Z - Z.mean(axis=0)) / sd


def farthest_point_indices(Z: np.ndarray, target: int) -> np.ndarray:
    """Greedy max-min selection seeded by the point nearest the centroid."""
    N = Z.shape[0]
    target = min(int(target), N)
    if target <= 0:
        return np.zeros(0, dtype=int)
    first = int(np.argmin(np.linalg.norm(Z - Z.mean(axis=0), axis=1)))
    chosen = [first]
    dmin = np.linalg.norm(Z - Z[first], axis=1)
    for _ in range(target - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(Z - Z[nxt], axis=1))
    return np.array(chosen, dtype=int)


def refine_spread(Z: np.ndarray, chosen: np.ndarray, max_swaps: int | None = None) -> np.ndarray:
    """Swap an endpoint of the closest chosen pair for the best outside point while the min distance grows."""
    chosen = np.array(chosen, dtype=int)
    k = chosen.size
    if k < 2 or k >= Z.shape[0]:
        return chosen
    max_swaps = 2 * k if max_swaps is None else max_swaps
    for _ in range(max_swaps):
        C = Z[chosen]
        D = np.linalg.norm(C[:, None] - C[None], axis=-1)
        np.fill_diagonal(D, np.inf)
        i, j = np.unravel_index(np.argmin(D), D.shape)
        d0 = D[i, j]
        outside = np.setdiff1d(np.arange(Z.shape[0]), chosen)
        best_val, best = d0, None
        for p in (i, j):
            keep = np.delete(np.arange(k), p)
            rest = D[np.ix_(keep, keep)].min() if keep.size > 1 else np.inf
            to_keep = np.linalg.norm(Z[outside][:, None] - C[keep][None], axis=-1).min(axis=1)
            cand = np.minimum(to_keep, rest)
            q = int(np.argmax(cand))
            if cand[q] > best_val * (1 + 1e-12):
                best_val, best = cand[q], (p, outside[q])
        if best is None:
            break
        chosen[best[0]] = best[1]
    return chosen


def spread_subsample(ds: Dataset, target: int) -> Dataset:
    """Keep ``target`` samples spread uniformly through normalized (x, v, u) space.

    Farthest-point selection followed by closest-pair swaps; time order of
    the kept samples is preserved.
    """
    if target >= ds.N:
        return ds
    Z = spread_features(ds)
    idx = np.sort(refine_spread(Z, farthest_point_indices(Z, target)))
    return ds.subset(idx)
