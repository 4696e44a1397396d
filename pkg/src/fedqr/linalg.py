"""Dense linear algebra kernel shared by every other module.

All matrices are 2-D float64 ndarrays. Shape checking, the deterministic QR
sign convention and the finiteness contract live here so the layers above can
assume well-formed inputs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class RankError(ValueError):
    """A requested rank or slice width exceeds the available dimension."""


class BasisError(ValueError):
    """A matrix expected to have orthonormal columns does not."""


def as_matrix(values) -> np.ndarray:
    """Coerce nested sequences (or an array) to a 2-D float64 matrix."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if lhs.ndim != 2 or rhs.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    return lhs @ rhs


def thin_qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Economy QR factorization with a deterministic sign convention.

    Returns (Q, R) with Q of shape (rows, q), q = min(rows, cols), having
    orthonormal columns and R upper triangular. Columns of Q / rows of R are
    flipped so every diagonal entry of R is nonnegative; this removes the sign
    ambiguity of Householder QR and makes repeated factorizations of the same
    input bit-identical. Rank-deficient input is legal (trailing diagonal of R
    is zero or near zero).
    """
    if m.ndim != 2:
        raise ShapeError("thin_qr expects a 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("thin_qr input contains NaN or Inf")
    q, r = np.linalg.qr(m, mode="reduced")
    # flip only strictly negative diagonal entries; zeros stay untouched
    signs = np.where(np.diagonal(r) < 0.0, -1.0, 1.0)
    q = q * signs[np.newaxis, :]
    r = signs[:, np.newaxis] * r
    return q, r


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m, dtype=np.float64))))


def slice_cols(m: np.ndarray, first_n: int) -> np.ndarray:
    """Copy of the leading ``first_n`` columns; the source is untouched."""
    if not 0 < first_n <= m.shape[1]:
        raise RankError(f"cannot take {first_n} columns from shape {m.shape}")
    return m[:, :first_n].copy()


def slice_rows(m: np.ndarray, first_n: int) -> np.ndarray:
    """Copy of the leading ``first_n`` rows; the source is untouched."""
    if not 0 < first_n <= m.shape[0]:
        raise RankError(f"cannot take {first_n} rows from shape {m.shape}")
    return m[:first_n, :].copy()


def subspace_residual(basis: np.ndarray, v: np.ndarray, ortho_tol: float = 1e-8) -> float:
    """Frobenius norm of ``v`` minus its projection onto colspan(basis).

    ``basis`` must have orthonormal columns (checked entrywise against
    ``ortho_tol``); a zero residual certifies that every column of ``v`` lies
    in the span of the basis.
    """
    if basis.ndim != 2 or v.ndim != 2:
        raise ShapeError("subspace_residual expects 2-D matrices")
    if basis.shape[0] != v.shape[0]:
        raise ShapeError(f"basis has {basis.shape[0]} rows but v has {v.shape[0]}")
    gram = basis.T @ basis
    defect = np.max(np.abs(gram - np.eye(basis.shape[1])))
    if defect > ortho_tol:
        raise BasisError(f"basis columns are not orthonormal (defect {defect:.3e})")
    residual = v - basis @ (basis.T @ v)
    return frobenius_norm(residual)
