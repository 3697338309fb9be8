"""Structured symmetric positive-definite matrices and their Cholesky factors.

Every class is batched: leading axes index independent matrices (for example
one per hyperparameter value), and vectors carry the matrix dimension on the
last axis. Three layouts are supported:

* dense ``(..., n, n)``
* block diagonal with equal block size ``(..., nb, bs, bs)``
* tridiagonal stored as a ``(diag (..., n), off (..., n - 1))`` band pair
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import IndefiniteHessian, StructureViolation

__all__ = [
    "LatentStructure",
    "DensePrecision",
    "BlockPrecision",
    "TridiagonalPrecision",
    "DenseFactor",
    "BlockFactor",
    "TridiagonalFactor",
    "half_logdet",
]


@dataclass(frozen=True)
class LatentStructure:
    """Sparsity pattern of the latent precision.

    Parameters
    ----------
    kind : {"dense", "block", "tridiagonal"}
    dim : int
        Latent dimension ``d_z``.
    block_size : int
        Size of each diagonal block (block layout only).
    """

    kind: str
    dim: int
    block_size: int = 0

    def __post_init__(self):
        if self.kind not in ("dense", "block", "tridiagonal"):
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("latent dimension must be positive")
        if self.kind == "block":
            if self.block_size < 1 or self.dim % self.block_size:
                raise ValueError("block sizes must be equal and sum to the latent dimension")
        if self.kind == "tridiagonal" and self.dim < 2:
            raise ValueError("tridiagonal structure requires dim >= 2")

    @classmethod
    def dense(cls, dim):
        return cls("dense", dim)

    @classmethod
    def blocks(cls, sizes):
        sizes = list(sizes)
        if len(set(sizes)) != 1:
            raise ValueError("only equal block sizes are supported")
        return cls("block", sum(sizes), sizes[0])

    @classmethod
    def tridiagonal(cls, dim):
        return cls("tridiagonal", dim)

    @property
    def n_blocks(self):
        return self.dim // self.block_size if self.kind == "block" else 1

    @property
    def block_sizes(self):
        return [self.block_size] * self.n_blocks if self.kind == "block" else [self.dim]


def _take(arr, idx, nbatch):
    if nbatch == 0:
        raise IndexError("cannot index an unbatched matrix")
    return arr[idx]


def _batched_solve(A, y):
    """Solve ``A x = y`` where ``y`` may carry extra leading axes."""
    extra = y.ndim - (A.ndim - 1)
    if extra <= 0:
        return np.linalg.solve(A, y[..., None])[..., 0]
    lead = y.shape[:extra]
    flat = y.reshape((-1,) + y.shape[extra:])
    rhs = np.moveaxis(flat, 0, -1)
    out = np.linalg.solve(A, rhs)
    return np.moveaxis(out, -1, 0).reshape(y.shape)


# ---------------------------------------------------------------------------
# factors
# ---------------------------------------------------------------------------


class _Factor:
    """Lower Cholesky factor ``L`` with ``H = L L^T``."""

    def half_logdet(self):
        return np.sum(np.log(self.pivots()), axis=-1)

    def condition(self):
        """Condition number estimate ``(max pivot / min pivot)^2``."""
        p = self.pivots()
        return (np.max(p, axis=-1) / np.min(p, axis=-1)) ** 2


class DenseFactor(_Factor):
    def __init__(self, L):
        self.L = np.asarray(L, dtype=float)

    structure_kind = "dense"

    @property
    def batch_shape(self):
        return self.L.shape[:-2]

    @property
    def dim(self):
        return self.L.shape[-1]

    def pivots(self):
        return np.diagonal(self.L, axis1=-2, axis2=-1)

    def lt_matvec(self, x):
        return np.einsum("...ji,...j->...i", self.L, x)

    def l_matvec(self, x):
        return np.einsum("...ij,...j->...i", self.L, x)

    def _solve(self, y, trans):
        y = np.asarray(y, dtype=float)
        if self.L.ndim == 2:
            flat = y.reshape(-1, y.shape[-1]).T
            out = solve_triangular(self.L, flat, lower=True, trans=trans, check_finite=False)
            return out.T.reshape(y.shape)
        A = np.swapaxes(self.L, -1, -2) if trans else self.L
        return _batched_solve(A, y)

    def solve_l(self, y):
        """``L^{-1} y``."""
        return self._solve(y, 0)

    def solve_lt(self, y):
        """``L^{-T} y``."""
        return self._solve(y, 1)

    def to_precision(self):
        return DensePrecision(self.L @ np.swapaxes(self.L, -1, -2))

    def take(self, idx):
        return DenseFactor(_take(self.L, idx, len(self.batch_shape)))

    def put(self, mask, other):
        L = self.L.copy()
        L[mask] = other.L[mask] if other.L.shape == L.shape else other.L
        return DenseFactor(L)

    def inverse_transpose_columns(self):
        """Matrix whose columns are ``L^{-T} e_j``."""
        eye = np.broadcast_to(np.eye(self.dim), self.L.shape)
        return np.linalg.solve(np.swapaxes(self.L, -1, -2), eye)


class BlockFactor(_Factor):
    def __init__(self, L):
        self.L = np.asarray(L, dtype=float)

    structure_kind = "block"

    @property
    def batch_shape(self):
        return self.L.shape[:-3]

    @property
    def dim(self):
        return self.L.shape[-3] * self.L.shape[-1]

    def _split(self, x):
        nb, bs = self.L.shape[-3], self.L.shape[-1]
        return np.asarray(x, dtype=float).reshape(np.shape(x)[:-1] + (nb, bs))

    @staticmethod
    def _merge(xb):
        return xb.reshape(xb.shape[:-2] + (-1,))

    def pivots(self):
        p = np.diagonal(self.L, axis1=-2, axis2=-1)
        return p.reshape(p.shape[:-2] + (-1,))

    def lt_matvec(self, x):
        return self._merge(np.einsum("...ji,...j->...i", self.L, self._split(x)))

    def l_matvec(self, x):
        return self._merge(np.einsum("...ij,...j->...i", self.L, self._split(x)))

    def _solve(self, y, trans):
        yb = self._split(y)
        if self.L.shape[-1] == 1:
            return self._merge(yb / self.L[..., 0])
        A = np.swapaxes(self.L, -1, -2) if trans else self.L
        return self._merge(_batched_solve(A, yb))

    def solve_l(self, y):
        return self._solve(y, False)

    def solve_lt(self, y):
        return self._solve(y, True)

    def to_precision(self):
        return BlockPrecision(self.L @ np.swapaxes(self.L, -1, -2))

    def take(self, idx):
        return BlockFactor(_take(self.L, idx, len(self.batch_shape)))

    def put(self, mask, other):
        L = self.L.copy()
        L[mask] = other.L[mask] if other.L.shape == L.shape else other.L
        return BlockFactor(L)

    def inverse_transpose_columns(self):
        nb, bs = self.L.shape[-3], self.L.shape[-1]
        inv = np.linalg.inv(np.swapaxes(self.L, -1, -2))
        out = np.zeros(self.batch_shape + (self.dim, self.dim))
        for b in range(nb):
            sl = slice(b * bs, (b + 1) * bs)
            out[..., sl, sl] = inv[..., b, :, :]
        return out


class TridiagonalFactor(_Factor):
    """Lower bidiagonal factor with diagonal ``d`` and subdiagonal ``e``."""

    def __init__(self, d, e):
        self.d = np.asarray(d, dtype=float)
        self.e = np.asarray(e, dtype=float)

    structure_kind = "tridiagonal"

    @property
    def batch_shape(self):
        return self.d.shape[:-1]

    @property
    def dim(self):
        return self.d.shape[-1]

    def pivots(self):
        return self.d

    def lt_matvec(self, x):
        x = np.asarray(x, dtype=float)
        out = self.d * x
        out[..., :-1] += self.e * x[..., 1:]
        return out

    def l_matvec(self, x):
        x = np.asarray(x, dtype=float)
        out = self.d * x
        out[..., 1:] += self.e * x[..., :-1]
        return out

    def solve_l(self, y):
        y = np.asarray(y, dtype=float)
        d, e = self.d, self.e
        out = np.empty(np.broadcast_shapes(y.shape, d.shape))
        out[..., 0] = y[..., 0] / d[..., 0]
        for i in range(1, out.shape[-1]):
            out[..., i] = (y[..., i] - e[..., i - 1] * out[..., i - 1]) / d[..., i]
        return out

    def solve_lt(self, y):
        y = np.asarray(y, dtype=float)
        d, e = self.d, self.e
        out = np.empty(np.broadcast_shapes(y.shape, d.shape))
        n = out.shape[-1]
        out[..., n - 1] = y[..., n - 1] / d[..., n - 1]
        for i in range(n - 2, -1, -1):
            out[..., i] = (y[..., i] - e[..., i] * out[..., i + 1]) / d[..., i]
        return out

    def to_precision(self):
        diag = self.d ** 2
        diag[..., 1:] += self.e ** 2
        return TridiagonalPrecision(diag, self.d[..., :-1] * self.e)

    def take(self, idx):
        nb = len(self.batch_shape)
        return TridiagonalFactor(_take(self.d, idx, nb), _take(self.e, idx, nb))

    def put(self, mask, other):
        d, e = self.d.copy(), self.e.copy()
        d[mask] = other.d[mask] if other.d.shape == d.shape else other.d
        e[mask] = other.e[mask] if other.e.shape == e.shape else other.e
        return TridiagonalFactor(d, e)

    def inverse_transpose_columns(self):
        n = self.dim
        eye = np.eye(n).reshape((n,) + (1,) * len(self.batch_shape) + (n,))
        return np.moveaxis(self.solve_lt(eye), 0, -1)


# ---------------------------------------------------------------------------
# precisions
# ---------------------------------------------------------------------------


class _Precision:
    def cholesky(self):
        """Cholesky factor; raises :class:`IndefiniteHessian` on failure."""
        factor, ok, pivot = self.cholesky_batch()
        if not np.all(ok):
            first = int(np.argmin(np.ravel(ok)))
            idx = int(np.ravel(pivot)[first])
            raise IndefiniteHessian(
                f"non-positive pivot at index {idx}", pivot_index=idx,
                pivot_value=self._pivot_value(first, idx),
            )
        return factor

    def _pivot_value(self, flat_batch, idx):
        return float("nan")

    def half_logdet(self):
        """Half log-determinant via Cholesky."""
        return self.cholesky().half_logdet()


def _dense_cholesky(A):
    """Batched lower Cholesky with per-matrix failure reporting."""
    A = np.asarray(A, dtype=float)
    batch = A.shape[:-2]
    n = A.shape[-1]
    flat = A.reshape((-1, n, n))
    ok = np.all(np.isfinite(flat), axis=(1, 2))
    pivot = np.full(flat.shape[0], -1, dtype=int)
    pivot[~ok] = 0
    L = np.full_like(flat, np.nan)
    try:
        if ok.all():
            L = np.linalg.cholesky(flat)
            return L.reshape(A.shape), ok.reshape(batch), pivot.reshape(batch)
    except np.linalg.LinAlgError:
        pass
    for b in np.flatnonzero(ok):
        c, info = lapack.dpotrf(flat[b], lower=1, clean=1)
        if info == 0:
            L[b] = c
        else:
            ok[b] = False
            pivot[b] = info - 1
    return L.reshape(A.shape), ok.reshape(batch), pivot.reshape(batch)


class DensePrecision(_Precision):
    kind = "dense"

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    @property
    def batch_shape(self):
        return self.matrix.shape[:-2]

    @property
    def dim(self):
        return self.matrix.shape[-1]

    def to_dense(self):
        return self.matrix

    def matvec(self, v):
        return np.einsum("...ij,...j->...i", self.matrix, v)

    def cholesky_batch(self):
        L, ok, pivot = _dense_cholesky(self.matrix)
        return DenseFactor(L), ok, pivot

    def take(self, idx):
        return DensePrecision(_take(self.matrix, idx, len(self.batch_shape)))


class BlockPrecision(_Precision):
    kind = "block"

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=float)

    @property
    def batch_shape(self):
        return self.blocks.shape[:-3]

    @property
    def dim(self):
        return self.blocks.shape[-3] * self.blocks.shape[-1]

    def to_dense(self):
        nb, bs = self.blocks.shape[-3], self.blocks.shape[-1]
        out = np.zeros(self.batch_shape + (self.dim, self.dim))
        for b in range(nb):
            sl = slice(b * bs, (b + 1) * bs)
            out[..., sl, sl] = self.blocks[..., b, :, :]
        return out

    def matvec(self, v):
        nb, bs = self.blocks.shape[-3], self.blocks.shape[-1]
        vb = np.asarray(v).reshape(np.shape(v)[:-1] + (nb, bs))
        out = np.einsum("...ij,...j->...i", self.blocks, vb)
        return out.reshape(out.shape[:-2] + (-1,))

    def cholesky_batch(self):
        nb, bs = self.blocks.shape[-3], self.blocks.shape[-1]
        batch = self.batch_shape
        if bs == 1:
            v = self.blocks[..., 0, 0]
            good = np.isfinite(v) & (v > 0)
            L = np.where(good, np.sqrt(np.where(good, v, 1.0)), np.nan)[..., None, None]
            ok = np.all(good, axis=-1)
            pivot = np.where(ok, -1, np.argmin(good, axis=-1))
            return BlockFactor(L), ok, pivot
        L, okb, pb = _dense_cholesky(self.blocks)
        ok = np.all(okb, axis=-1)
        first = np.argmin(okb, axis=-1)
        pivot = np.where(ok, -1, first * bs + np.take_along_axis(
            pb, first[..., None], axis=-1)[..., 0])
        return BlockFactor(L), np.asarray(ok).reshape(batch), np.asarray(pivot).reshape(batch)

    def take(self, idx):
        return BlockPrecision(_take(self.blocks, idx, len(self.batch_shape)))


class TridiagonalPrecision(_Precision):
    kind = "tridiagonal"

    def __init__(self, diag, off):
        self.diag = np.asarray(diag, dtype=float)
        self.off = np.asarray(off, dtype=float)

    @property
    def batch_shape(self):
        return self.diag.shape[:-1]

    @property
    def dim(self):
        return self.diag.shape[-1]

    def to_dense(self):
        n = self.dim
        out = np.zeros(self.batch_shape + (n, n))
        i = np.arange(n)
        out[..., i, i] = self.diag
        out[..., i[:-1], i[1:]] = self.off
        out[..., i[1:], i[:-1]] = self.off
        return out

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        out = self.diag * v
        out[..., :-1] += self.off * v[..., 1:]
        out[..., 1:] += self.off * v[..., :-1]
        return out

    def cholesky_batch(self):
        """O(n) recurrence ``L_ii = sqrt(H_ii - L_{i,i-1}^2)``."""
        D, O = self.diag, self.off
        n = self.dim
        d = np.empty_like(D)
        e = np.empty_like(O)
        ok = np.ones(self.batch_shape, dtype=bool)
        pivot = np.full(self.batch_shape, -1, dtype=int)
        self._failed_value = np.full(self.batch_shape, np.nan)
        p = D[..., 0].copy()
        for i in range(n):
            if i > 0:
                e[..., i - 1] = O[..., i - 1] / d[..., i - 1]
                p = D[..., i] - e[..., i - 1] ** 2
            bad = ~(p > 0) & ok
            if np.any(bad):
                pivot[bad] = i
                self._failed_value[bad] = p[bad] if np.ndim(p) else p
                ok &= ~bad
            d[..., i] = np.sqrt(np.where(p > 0, p, np.nan))
        return TridiagonalFactor(d, e), ok, pivot

    def _pivot_value(self, flat_batch, idx):
        return float(np.ravel(self._failed_value)[flat_batch])

    def take(self, idx):
        nb = len(self.batch_shape)
        return TridiagonalPrecision(_take(self.diag, idx, nb), _take(self.off, idx, nb))

    @classmethod
    def from_dense(cls, H, check=False, tol=1e-8):
        """Extract the band of a dense matrix.

        With ``check=True`` raise :class:`StructureViolation` if any entry
        outside the band exceeds ``tol * max|H|``.
        """
        H = np.asarray(H, dtype=float)
        n = H.shape[-1]
        i = np.arange(n)
        if check:
            outside = np.abs(np.triu(H, 2)).max() if n > 2 else 0.0
            if outside > tol * np.abs(H).max():
                raise StructureViolation(f"entry outside band of size {outside:.3e}")
        return cls(H[..., i, i], H[..., i[:-1], i[1:]])


def half_logdet(H):
    """Half log-determinant of a structured SPD matrix.

    Raises
    ------
    IndefiniteHessian
        If a Cholesky pivot is not positive.
    """
    if isinstance(H, np.ndarray):
        H = DensePrecision(H)
    return H.half_logdet()


def precision_from_dense(H, structure, check=False):
    """Convert a dense matrix to the layout named by ``structure``."""
    H = np.asarray(H, dtype=float)
    if structure.kind == "dense":
        return DensePrecision(H)
    if structure.kind == "tridiagonal":
        return TridiagonalPrecision.from_dense(H, check=check)
    bs = structure.block_size
    nb = structure.n_blocks
    blocks = np.stack([H[..., b * bs:(b + 1) * bs, b * bs:(b + 1) * bs] for b in range(nb)], axis=-3)
    return BlockPrecision(blocks)
