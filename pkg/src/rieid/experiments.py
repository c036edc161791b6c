"""Data generators for the worked experiments and for randomized checks.

Everything here is reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import ImplicitModel, LinearModel, MonomialBasis, build_basis
from .rie import MetricMatrix, stable_linear_embedding
from .sim import simulate

GENERATORS = ("dt-example", "linear-random")


@dataclass(frozen=True)
class ExperimentSpec:
    generator: str = "dt-example"
    horizon: int = 500
    amplitude: float = 4.0
    sweep: float = 10.0  # chirp reaches sweep/horizon cycles per step
    test_horizon: int = 200
    test_period: float = 200.0
    noise_std: float = 0.05
    seed: int = 42
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.horizon < 2 or self.test_horizon < 2:
            raise ValueError("horizons must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


# ---------------------------------------------------------------------------
# Second-order DT example
# ---------------------------------------------------------------------------

_ROT = np.array([[0.4, -0.9], [0.9, 0.4]])


def coefficients(basis: MonomialBasis, rows: list[dict[tuple, float]]) -> np.ndarray:
    """Coefficient matrix from per-row ``{exponent tuple: value}`` maps."""
    index = {tuple(int(a) for a in e): j for j, e in enumerate(basis.exps)}
    out = np.zeros((len(rows), len(basis)))
    for i, row in enumerate(rows):
        for mono, val in row.items():
            out[i, index[mono]] = val
    return out


def dt_example_system() -> ImplicitModel:
    """``e(v) = [2v1 + v2^2 v1 + v1^5/3, v1 + 2v2 + v1^2 v2 + v2^5/3]``, ``f = R x + [u, 0]``, ``y = x``.

    ``E + E' - 2I = [[2 + 2v2^2 + 10/3 v1^4, 1 + 4 v1 v2], [., 2 + 2 v1^2 + 10/3 v2^4]]``
    is positive semidefinite, so ``r0 = 1``.
    """
    e_rows = [
        {(1, 0, 0): 2.0, (1, 2, 0): 1.0, (5, 0, 0): 1 / 3},
        {(1, 0, 0): 1.0, (0, 1, 0): 2.0, (2, 1, 0): 1.0, (0, 5, 0): 1 / 3},
    ]
    eb = MonomialBasis(2, 1, np.array(sorted({m for r in e_rows for m in r})))
    lb = build_basis(2, 1, total=1, min_degree=1)
    x1, x2, u = (1, 0, 0), (0, 1, 0), (0, 0, 1)
    f_rows = [{x1: _ROT[0, 0], x2: _ROT[0, 1], u: 1.0}, {x1: _ROT[1, 0], x2: _ROT[1, 1]}]
    g_rows = [{x1: 1.0}, {x2: 1.0}]
    return ImplicitModel(
        "dt", eb, coefficients(eb, e_rows), lb, coefficients(lb, f_rows), lb, coefficients(lb, g_rows), r0=1.0
    )


def chirp(t: np.ndarray, amplitude: float = 4.0, sweep: float = 10.0, horizon: int = 500) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return amplitude * np.sin(2 * math.pi * sweep / horizon**2 * t**2)


def test_input(t: np.ndarray, amplitude: float = 4.0, period: float = 200.0) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return amplitude * np.sin(2 * math.pi * t / period)


@dataclass(frozen=True)
class DTExampleData:
    train: Dataset  # noisy pairs (x(t), x(t+1)) with y = noisy x
    test: Dataset  # noise-free response to the test input
    clean_train: np.ndarray  # noise-free training states


def dt_example_data(spec: ExperimentSpec = ExperimentSpec()) -> DTExampleData:
    """Simulate the true system under the chirp and the sinusoidal test input.

    Training observations are ``x + w`` with ``w ~ N(0, noise_std^2 I)``; the
    successor of sample ``t`` is the observation at ``t + 1``.
    """
    rng = np.random.default_rng(spec.seed)
    true = dt_example_system()
    t = np.arange(1, spec.horizon + 1, dtype=float)
    u = chirp(t, spec.amplitude, spec.sweep, spec.horizon)
    traj = simulate(true, u, np.zeros(2))
    X = traj.x
    Xn = X + spec.noise_std * rng.standard_normal(X.shape)
    train = Dataset(
        "dt", t[:-1], u[:-1, None], Xn[:-1], x=Xn[:-1], v=Xn[1:],
        meta={"generator": "dt-example", "seed": spec.seed, "noise_std": spec.noise_std},
    )
    tt = np.arange(1, spec.test_horizon + 1, dtype=float)
    ut = test_input(tt, spec.amplitude, spec.test_period)
    tr = simulate(true, ut, np.zeros(2))
    test = Dataset("dt", tt, ut[:, None], tr.y, x=tr.x, meta={"generator": "dt-example-test"})
    return DTExampleData(train, test, X)


def dt_example_classes(total_deg_f: int = 7, e_degree: int = 3) -> tuple[MonomialBasis, MonomialBasis, MonomialBasis, np.ndarray]:
    """Bases for the example fit: cubic ``e``, ``f`` spanning ``u`` and x-monomials up to ``total_deg_f``; fixed ``g = x``."""
    eb = build_basis(2, 1, x_degree=e_degree, u_degree=0, min_degree=1)
    fx = build_basis(2, 1, x_degree=total_deg_f, u_degree=0)
    fb = MonomialBasis(2, 1, np.vstack([fx.exps, [[0, 0, 1]]]))
    gb = build_basis(2, 1, x_degree=1, u_degree=0, min_degree=1)
    return eb, fb, gb, coefficients(gb, [{(1, 0, 0): 1.0}, {(0, 1, 0): 1.0}])


# ---------------------------------------------------------------------------
# Random stable linear systems
# ---------------------------------------------------------------------------


def random_stable_linear(n: int, m: int, k: int, domain: str, rng: np.random.Generator, margin: float = 0.1) -> LinearModel:
    """Random ``(A, B, C, D)`` with ``A`` Schur (DT) or Hurwitz (CT) by at least ``margin``."""
    A = rng.standard_normal((n, n))
    if domain == "dt":
        rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
        A = A * rng.uniform(0.2, 1.0 - margin) / rho
    elif domain == "ct":
        A = A - (np.linalg.eigvals(A).real.max() + rng.uniform(margin, 1.0)) * np.eye(n)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return LinearModel(A, rng.standard_normal((n, m)), rng.standard_normal((k, n)), rng.standard_normal((k, m)))


def linear_samples(lm: LinearModel, N: int, domain: str, rng: np.random.Generator, noise: float = 0.0) -> Dataset:
    """Independent samples ``(v, x, u, y)`` with ``v = A x + B u`` (successor or rate)."""
    X = rng.standard_normal((N, lm.n))
    U = rng.standard_normal((N, lm.m))
    V = X @ lm.A.T + U @ lm.B.T
    Y = X @ lm.C.T + U @ lm.D.T
    if noise:
        V = V + noise * rng.standard_normal(V.shape)
        Y = Y + noise * rng.standard_normal(Y.shape)
    return Dataset(domain, np.arange(N, dtype=float), U, Y, x=X, v=V)


def linear_trajectory(lm: LinearModel, N: int, rng: np.random.Generator, noise: float = 0.0) -> Dataset:
    """Consecutive DT data from a random input; observations of states and outputs carry noise."""
    U = rng.standard_normal((N + 1, lm.m))
    X = np.zeros((N + 1, lm.n))
    X[0] = rng.standard_normal(lm.n)
    for t in range(N):
        X[t + 1] = lm.A @ X[t] + lm.B @ U[t]
    Y = X @ lm.C.T + U @ lm.D.T
    Xo = X + noise * rng.standard_normal(X.shape)
    Yo = Y + noise * rng.standard_normal(Y.shape)
    return Dataset("dt", np.arange(1, N + 1, dtype=float), U[:N], Yo[:N], x=Xo[:N], v=Xo[1:])


def smooth_signals(n: int, m: int, k: int, T: float, samples: int, rng: np.random.Generator, harmonics: int = 3) -> Dataset:
    """CT signal data built from random sinusoids; ``v`` is the exact derivative of ``x``."""
    t = np.linspace(0.0, T, samples)

    def bank(dim, deriv=False):
        amp = rng.standard_normal((dim, harmonics))
        w = rng.uniform(0.2, 2.0, size=(dim, harmonics))
        ph = rng.uniform(0, 2 * math.pi, size=(dim, harmonics))
        val = np.einsum("dh,tdh->td", amp, np.sin(w[None] * t[:, None, None] + ph[None]))
        der = np.einsum("dh,tdh->td", amp * w, np.cos(w[None] * t[:, None, None] + ph[None]))
        return val, der

    X, V = bank(n)
    U, _ = bank(m)
    Y, _ = bank(k)
    return Dataset("ct", t, U, Y, x=X, v=V)


def _linear_rows(M: np.ndarray, width: int) -> list[dict[tuple, float]]:
    eye = np.eye(width, dtype=int)
    return [{tuple(eye[j]): float(M[i, j]) for j in range(M.shape[1])} for i in range(M.shape[0])]


def random_certified_cubic(
    n: int, m: int, k: int, rng: np.random.Generator, cubic: float = 0.3
) -> tuple[ImplicitModel, MetricMatrix, LinearModel]:
    """Random DT model ``e(x) = R x + c*x^3`` (elementwise), ``f = R A x + R B u``, ``g = C x + D u``.

    ``R`` comes from the Schur embedding of ``A``, so with ``Q = R^-1``
    ``Rhat(x) = M - 6 diag(c x^2)`` is negative definite for every ``x``;
    ``r0`` is the smallest eigenvalue of ``R``. Also returns the linear part.
    """
    lm = random_stable_linear(n, m, k, "dt", rng)
    emb = stable_linear_embedding(lm.A, lm.C, "dt")
    R = emb.R
    eb = build_basis(n, m, x_degree=3, u_degree=0, min_degree=1)
    lb = build_basis(n, m, total=1, min_degree=1)
    e_rows = _linear_rows(R, n + m)
    for i in range(n):
        e_rows[i][tuple(3 * np.eye(n + m, dtype=int)[i])] = cubic * rng.uniform(0.2, 1.0)
    f_rows = _linear_rows(np.hstack([R @ lm.A, R @ lm.B]), n + m)
    g_rows = _linear_rows(np.hstack([lm.C, lm.D]), n + m)
    r0 = float(np.linalg.eigvalsh(R)[0])
    model = ImplicitModel(
        "dt", eb, coefficients(eb, e_rows), lb, coefficients(lb, f_rows), lb, coefficients(lb, g_rows), r0=r0
    )
    return model, MetricMatrix.from_Q(emb.Q), lm


def noisy_trajectory(
    model: ImplicitModel, N: int, rng: np.random.Generator, amplitude: float = 1.0, noise: float = 0.05
) -> Dataset:
    """Consecutive DT data: simulate from rest under a Gaussian input, then add noise to states and outputs."""
    U = amplitude * rng.standard_normal((N + 1, model.m))
    tr = simulate(model, U, np.zeros(model.n))
    X = tr.x + noise * rng.standard_normal(tr.x.shape)
    Y = tr.y + noise * rng.standard_normal(tr.y.shape)
    return Dataset("dt", np.arange(1, N + 1, dtype=float), U[:N], Y[:N], x=X[:N], v=X[1:])


# ---------------------------------------------------------------------------
# Synthetic spiking record
# ---------------------------------------------------------------------------


def multisine(t: np.ndarray, rng: np.random.Generator, tones: int = 12, fmax: float = 200.0, rms: float = 1.0) -> np.ndarray:
    f = np.sort(rng.uniform(1.0, fmax, size=tones))
    ph = rng.uniform(0, 2 * math.pi, size=tones)
    s = np.sin(2 * math.pi * f[None] * t[:, None] + ph[None]).sum(axis=1)
    return rms * s / max(np.std(s), 1e-12)


def synthetic_neuron(seed: int = 0, duration: float = 1.2, rate: float = 10_000.0, spikes: int = 22) -> Dataset:
    """Membrane-potential-like record: a slow input-driven baseline plus spike responses.

    Each spike is a sharp rise followed by a sum of decaying exponentials
    (fast repolarization, slow after-hyperpolarization). Units are mV and
    the input is a zero-order-held multisine current.
    """
    rng = np.random.default_rng(seed)
    N = int(round(duration * rate))
    t = np.arange(N) / rate
    u = multisine(t, rng)
    hold = max(1, int(rate / 1000))  # 1 kHz zero-order hold
    u = np.repeat(u[::hold], hold)[:N]
    # baseline: first-order response of the membrane to the input
    tau = 0.02
    a = math.exp(-1 / (rate * tau))
    base = np.zeros(N)
    for i in range(1, N):
        base[i] = a * base[i - 1] + (1 - a) * 4.0 * u[i - 1]
    y = -65.0 + base
    times = np.sort(rng.uniform(0.05, duration - 0.02, size=spikes))
    for s in times:
        d = t - s
        on = d >= 0
        dd = d[on]
        rise = 1 - np.exp(-dd / 0.0003)
        y[on] += rise * (90.0 * np.exp(-dd / 0.0015) - 12.0 * np.exp(-dd / 0.02))
    y = y + 0.05 * rng.standard_normal(N)
    return Dataset("ct", t, u[:, None], y[:, None], meta={"generator": "synthetic-neuron", "seed": seed, "spikes": spikes})


