"""Dense matrix primitives shared by the compressors.

Everything here works on float32 numpy arrays. Products and norms accumulate
in float64 and round back to float32 so results are stable across call sites.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE = np.float32

# |R_ii| below this marks a degenerate column during orthogonalization.
RANK_TOL = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class ShapePolicy:
    shape: tuple[int, ...]
    n: int
    m: int
    compressible: bool

    @property
    def numel(self) -> int:
        return self.n * self.m


def reshape_to_matrix(shape: Sequence[int]) -> ShapePolicy:
    """Map a parameter shape to its matrix view.

    Vectors are left alone (compressible=False, viewed as 1 x len); anything
    with two or more dims becomes dim0 x prod(rest).
    """
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("empty shape")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every dimension must be >= 1, got {shape}")
    if len(shape) == 1:
        return ShapePolicy(shape, 1, shape[0], False)
    rest = int(np.prod(shape[1:]))
    return ShapePolicy(shape, shape[0], rest, True)


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    return a


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)


def seeded_normal(rows: int, cols: int, seed) -> np.ndarray:
    """Standard-normal float32 matrix; same seed gives the same bytes everywhere."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be >= 1, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, cols), dtype=np.float32)


def _qr_signed(a: np.ndarray):
    q, r = np.linalg.qr(a, mode="reduced")
    # make diag(R) nonnegative so the factorization is unique
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def orthogonalize(a, seed=0, max_repairs: int = 8) -> np.ndarray:
    """Q factor of the reduced QR of ``a`` with columns orthonormal.

    Columns whose R diagonal collapses below ``RANK_TOL`` are replaced by
    seeded noise and the factorization is redone, so a zero input still
    yields an orthonormal basis. Workers passing the same ``seed`` get the
    same repaired columns.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("orthogonalize got non-finite entries")
    rows, cols = a.shape
    if cols > rows:
        raise ShapeError(f"cannot orthonormalize {cols} columns in R^{rows}")
    work = a.astype(np.float64)
    rng = np.random.default_rng(seed)
    for _ in range(max_repairs + 1):
        q, r = _qr_signed(work)
        bad = np.flatnonzero(np.abs(np.diag(r)) < RANK_TOL)
        if bad.size == 0:
            break
        work = work.copy()
        work[:, bad] = rng.standard_normal((rows, bad.size))
    return q.astype(DTYPE)


def frobenius_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))
