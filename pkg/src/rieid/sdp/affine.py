"""Matrix-valued affine functions of a flat decision vector.

An :class:`Affine` of shape ``(r, c)`` stands for ``const + reshape(coef @ x)``
where ``coef`` has one row per entry in row-major order. The column count of
``coef`` may lag behind the program's variable count; missing columns are
zeros, so expressions built before later variables were declared stay valid.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp


def _pad(coef: sp.csr_matrix, nv: int) -> sp.csr_matrix:
    if coef.shape[1] == nv:
        return coef
    return sp.csr_matrix((coef.data, coef.indices, coef.indptr), shape=(coef.shape[0], nv))


class Affine:
    __slots__ = ("const", "coef")
    __array_priority__ = 100  # make ndarray @ Affine defer to __rmatmul__

    def __init__(self, const, coef: sp.spmatrix | None = None):
        const = np.asarray(const, dtype=float)
        if const.ndim == 0:
            const = const.reshape(1, 1)
        elif const.ndim == 1:
            const = const.reshape(-1, 1)
        self.const = const
        size = const.size
        if coef is None:
            coef = sp.csr_matrix((size, 0))
        coef = sp.csr_matrix(coef)
        if coef.shape[0] != size:
            raise ValueError(f"coefficient rows {coef.shape[0]} != entries {size}")
        self.coef = coef

    # -- constructors -----------------------------------------------------

    @classmethod
    def constant(cls, M) -> "Affine":
        return M if isinstance(M, Affine) else cls(M)

    @classmethod
    def zeros(cls, shape) -> "Affine":
        return cls(np.zeros(shape))

    @classmethod
    def variable(cls, start: int, shape, index: np.ndarray | None = None) -> "Affine":
        """Entries map to decision indices ``start + index`` (row-major identity by default)."""
        r, c = shape
        if index is None:
            index = np.arange(r * c)
        index = np.asarray(index).ravel()
        coef = sp.csr_matrix(
            (np.ones(r * c), start + index, np.arange(r * c + 1)), shape=(r * c, start + int(index.max(initial=-1)) + 1)
        )
        return cls(np.zeros((r, c)), coef)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @property
    def nvars(self) -> int:
        return self.coef.shape[1]

    def is_constant(self) -> bool:
        return self.coef.nnz == 0

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nv = self.coef.shape[1]
        return self.const + (self.coef @ x[:nv]).reshape(self.shape)

    def __repr__(self) -> str:
        return f"Affine(shape={self.shape}, nnz={self.coef.nnz})"

    # -- arithmetic ---------------------------------------------------------

    def _lift(self, other) -> "Affine":
        if isinstance(other, Affine):
            return other
        other = np.asarray(other, dtype=float)
        if other.ndim == 0:
            other = np.full(self.shape, float(other))
        return Affine(other)

    def __add__(self, other) -> "Affine":
        other = self._lift(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        nv = max(self.nvars, other.nvars)
        return Affine(self.const + other.const, _pad(self.coef, nv) + _pad(other.coef, nv))

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine(-self.const, -self.coef)

    def __sub__(self, other) -> "Affine":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Affine":
        return self._lift(other) - self

    def __mul__(self, c) -> "Affine":
        c = float(c)
        return Affine(c * self.const, c * self.coef)

    __rmul__ = __mul__

    def __matmul__(self, M) -> "Affine":
        if isinstance(M, Affine):
            if M.is_constant():
                M = M.const
            elif self.is_constant():
                return self.const @ M
            else:
                raise ValueError("product of two non-constant affine expressions")
        M = np.atleast_2d(np.asarray(M, dtype=float))
        r, c = self.shape
        if M.shape[0] != c:
            raise ValueError(f"matmul shape mismatch {self.shape} @ {M.shape}")
        K = sp.kron(sp.identity(r, format="csr"), sp.csr_matrix(M.T), format="csr")
        return Affine(self.const @ M, K @ self.coef)

    def __rmatmul__(self, M) -> "Affine":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        r, c = self.shape
        if M.shape[1] != r:
            raise ValueError(f"matmul shape mismatch {M.shape} @ {self.shape}")
        K = sp.kron(sp.csr_matrix(M), sp.identity(c, format="csr"), format="csr")
        return Affine(M @ self.const, K @ self.coef)

    @property
    def T(self) -> "Affine":
        r, c = self.shape
        perm = np.arange(r * c).reshape(r, c).T.ravel()
        return Affine(self.const.T, self.coef[perm])

    def sym(self) -> "Affine":
        """``(A + A')/2``."""
        return (self + self.T) * 0.5

    def reshape(self, shape) -> "Affine":
        return Affine(self.const.reshape(shape), self.coef)

    def __getitem__(self, key) -> "Affine":
        idx = np.arange(self.const.size).reshape(self.shape)[key]
        idx = np.atleast_2d(idx)
        return Affine(self.const.ravel()[idx.ravel()].reshape(idx.shape), self.coef[idx.ravel()])

    # -- block assembly -------------------------------------------------------

    @staticmethod
    def bmat(blocks: Sequence[Sequence]) -> "Affine":
        """Block matrix; entries may be Affine, arrays, scalars or None (zeros).

        Every block row needs at least one entry with known height and every
        block column one with known width.
        """
        nr, nc = len(blocks), len(blocks[0])
        heights = [None] * nr
        widths = [None] * nc
        for i, row in enumerate(blocks):
            if len(row) != nc:
                raise ValueError("ragged block structure")
            for j, b in enumerate(row):
                if b is None or np.isscalar(b):
                    continue
                h, w = (b.shape if isinstance(b, Affine) else np.atleast_2d(b).shape)
                if heights[i] not in (None, h) or widths[j] not in (None, w):
                    raise ValueError(f"block ({i},{j}) has inconsistent shape {(h, w)}")
                heights[i], widths[j] = h, w
        if None in heights or None in widths:
            raise ValueError("could not infer all block sizes")
        R, C = sum(heights), sum(widths)
        ro = np.concatenate([[0], np.cumsum(heights)])
        co = np.concatenate([[0], np.cumsum(widths)])
        const = np.zeros((R, C))
        rows, parts = [], []
        nv = 0
        for i, row in enumerate(blocks):
            for j, b in enumerate(row):
                if b is None:
                    continue
                if np.isscalar(b):
                    const[ro[i] : ro[i + 1], co[j] : co[j + 1]] = b
                    continue
                if not isinstance(b, Affine):
                    const[ro[i] : ro[i + 1], co[j] : co[j + 1]] = np.atleast_2d(b)
                    continue
                const[ro[i] : ro[i + 1], co[j] : co[j + 1]] = b.const
                if b.coef.nnz:
                    h, w = b.shape
                    target = ((ro[i] + np.arange(h))[:, None] * C + (co[j] + np.arange(w))[None, :]).ravel()
                    rows.append(target)
                    parts.append(b.coef)
                    nv = max(nv, b.nvars)
        if not parts:
            return Affine(const)
        coef = sp.vstack([_pad(p, nv) for p in parts], format="coo")
        target = np.concatenate(rows)
        coef = sp.csr_matrix((coef.data, (target[coef.row], coef.col)), shape=(R * C, nv))
        return Affine(const, coef)

    @staticmethod
    def vstack(items: Sequence) -> "Affine":
        return Affine.bmat([[it] for it in items])

    @staticmethod
    def hstack(items: Sequence) -> "Affine":
        return Affine.bmat([list(items)])

    @staticmethod
    def sum(items: Sequence["Affine"]) -> "Affine":
        items = list(items)
        if not items:
            raise ValueError("empty sum")
        nv = max(it.nvars for it in items)
        const = sum(it.const for it in items)
        coef = _pad(items[0].coef, nv).copy()
        for it in items[1:]:
            coef = coef + _pad(it.coef, nv)
        return Affine(const, coef)
