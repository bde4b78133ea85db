"""Dense symmetric / SPD matrix algebra.

All the geometry in this package reduces to spectral calculus on small
(d <= 20) symmetric matrices: packing to and from triangular coordinates,
eigendecomposition, and the matrix exponential / logarithm / real powers
computed eigenvalue-wise.

Packing layout: the triangular coordinate vector walks the upper triangle
row by row, so for d = 2 the vector (v1, v2, v3) becomes

    [[v1, v2],
     [v2, v3]]

and ``vec`` inverts ``sym`` exactly.

Near-singular policy: operations that need eigenvalues strictly above
``eig_floor`` (default 1e-12) raise SingularMatrixError by default, because
silently clamped covariances near the boundary of the positive cone are a
known source of quietly wrong training runs.  Pass ``clamp=True`` to replace
offending eigenvalues with the floor instead.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericalError, SingularMatrixError

EIG_FLOOR = 1e-12

# exp overflows float64 just above this
_EXP_OVERFLOW = math.log(np.finfo(np.float64).max)


def sym_dim(n: int) -> int:
    """Matrix dimension d with d(d+1)/2 == n, else DimensionError."""
    d = int((math.isqrt(8 * n + 1) - 1) // 2)
    if d * (d + 1) // 2 != n:
        raise DimensionError(f"length {n} is not a triangular number d(d+1)/2")
    return d


def tri_len(d: int) -> int:
    return d * (d + 1) // 2


def sym(v: np.ndarray) -> np.ndarray:
    """Unpack triangular coordinates into a symmetric matrix (row-major upper
    triangle; see module docstring for the layout)."""
    v = np.asarray(v, dtype=np.float64)
    d = sym_dim(v.shape[-1])
    iu = np.triu_indices(d)
    out = np.zeros(v.shape[:-1] + (d, d))
    out[..., iu[0], iu[1]] = v
    out[..., iu[1], iu[0]] = v
    return out


def vec(s: np.ndarray) -> np.ndarray:
    """Pack a symmetric matrix into triangular coordinates, inverse of sym."""
    s = np.asarray(s, dtype=np.float64)
    d = s.shape[-1]
    iu = np.triu_indices(d)
    return s[..., iu[0], iu[1]]


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def is_symmetric(a: np.ndarray, tol: float = 0.0) -> bool:
    a = np.asarray(a)
    if a.shape[-1] != a.shape[-2]:
        return False
    return bool(np.all(np.abs(a - np.swapaxes(a, -1, -2)) <= tol))


def frobenius(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a), ord="fro"))


def spectral_decompose(s: np.ndarray):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric
    matrix, so that s == q @ diag(vals) @ q.T.

    Accepts a stack of matrices (..., d, d).
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericalError("spectral_decompose: non-finite entries")
    try:
        vals, q = np.linalg.eigh(s)
    except np.linalg.LinAlgError as e:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"eigendecomposition did not converge: {e}") from e
    return vals, q


def _apply_spectral(s, fn):
    vals, q = spectral_decompose(s)
    fv = fn(vals)
    return q @ (fv[..., :, None] * np.swapaxes(q, -1, -2)), vals


def mat_exp(s: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix; result is SPD."""
    vals, q = spectral_decompose(s)
    top = float(np.max(vals))
    if top > _EXP_OVERFLOW:
        raise NumericalError(f"mat_exp overflow: eigenvalue {top:.6g} exceeds exp range")
    ev = np.exp(vals)
    return q @ (ev[..., :, None] * np.swapaxes(q, -1, -2))


def checked_eigvals(vals: np.ndarray, eig_floor: float, clamp: bool, what: str) -> np.ndarray:
    """Enforce the near-singularity policy on a set of eigenvalues."""
    if clamp:
        return np.maximum(vals, eig_floor)
    low = float(np.min(vals))
    if low <= eig_floor:
        raise SingularMatrixError(
            f"{what}: eigenvalue {low:.6g} at or below floor {eig_floor:.3g}"
        )
    return vals


def mat_log(p: np.ndarray, eig_floor: float = EIG_FLOOR, clamp: bool = False) -> np.ndarray:
    """Principal matrix logarithm of an SPD matrix."""
    vals, q = spectral_decompose(p)
    vals = checked_eigvals(vals, eig_floor, clamp, "mat_log")
    lv = np.log(vals)
    return q @ (lv[..., :, None] * np.swapaxes(q, -1, -2))


def mat_pow(p: np.ndarray, t: float, eig_floor: float = EIG_FLOOR, clamp: bool = False) -> np.ndarray:
    """Real power P**t of an SPD matrix via exp(t log P)."""
    vals, q = spectral_decompose(p)
    vals = checked_eigvals(vals, eig_floor, clamp, "mat_pow")
    pv = np.power(vals, t)
    return q @ (pv[..., :, None] * np.swapaxes(q, -1, -2))


def inv_sqrt(p: np.ndarray, eig_floor: float = EIG_FLOOR, clamp: bool = False) -> np.ndarray:
    return mat_pow(p, -0.5, eig_floor=eig_floor, clamp=clamp)


def is_spd(p: np.ndarray, eig_floor: float = EIG_FLOOR) -> bool:
    p = np.asarray(p)
    if not is_symmetric(p, tol=0.0):
        p_sym = symmetrize(p)
        if frobenius(p - p_sym) > 1e-12 * max(1.0, frobenius(p)):
            return False
        p = p_sym
    vals = np.linalg.eigvalsh(p)
    return bool(np.min(vals) > eig_floor)
