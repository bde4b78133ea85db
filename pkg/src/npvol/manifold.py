"""The Riemannian manifold of non-singular Gaussian measures.

A point is a pair (mean, covariance) with SPD covariance.  The metric is
Euclidean on means and affine-invariant on covariances, which makes the
space globally non-positively curved, so geodesics, the exponential map,
and barycenters are all globally well defined.

Closed forms used throughout (these are the module's ground truth):

  distance((m0, S0), (m1, S1))
      = sqrt(|m0 - m1|^2 + 1/2 * sum_i log(lam_i)^2),
        lam_i the eigenvalues of S0^{-1} S1

  exp_map((m, S), (u, X))
      = (m + u, S^{1/2} expm(S^{-1/2} X S^{-1/2}) S^{1/2})

  |(u, X)|_(m,S)^2 = |u|^2 + 1/2 tr((S^{-1} X)^2)

with the tangent norm chosen so that |log_map(p, q)| == distance(p, q).

Barycenters of finitely supported laws are computed by the standard
fixed-point iteration z <- exp_map(z, sum_i w_i log_map(z, x_i)), which is
a unit-step Riemannian gradient descent and converges on NPC spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import symmat
from .errors import ConvergenceError, DimensionError, ValidationError
from .symmat import EIG_FLOOR


@dataclass
class GaussianPoint:
    """A non-singular Gaussian measure: mean vector and SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionError(f"cov shape {self.cov.shape} does not match mean dim {d}")
        if not symmat.is_symmetric(self.cov, tol=1e-12 * max(1.0, symmat.frobenius(self.cov))):
            raise ValidationError("covariance is not symmetric")
        self.cov = symmat.symmetrize(self.cov)
        vals = np.linalg.eigvalsh(self.cov)
        if float(np.min(vals)) <= EIG_FLOOR:
            raise ValidationError(
                f"covariance eigenvalue {float(np.min(vals)):.6g} at or below floor {EIG_FLOOR:g}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def standard(cls, d: int) -> "GaussianPoint":
        return cls(np.zeros(d), np.eye(d))

    def to_flat(self) -> np.ndarray:
        """Flat record (mean[d], vec(cov)[d(d+1)/2]) used by dataset files."""
        return np.concatenate([self.mean, symmat.vec(self.cov)])

    @classmethod
    def from_flat(cls, d: int, flat: np.ndarray) -> "GaussianPoint":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.shape[0] != d + symmat.tri_len(d):
            raise DimensionError(f"flat record length {flat.shape[0]} wrong for d={d}")
        return cls(flat[:d], symmat.sym(flat[d:]))

    def allclose(self, other: "GaussianPoint", atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.mean, other.mean, atol=atol)
            and np.allclose(self.cov, other.cov, atol=atol)
        )


@dataclass
class TangentVector:
    """Element of the tangent space: mean direction and symmetric matrix direction."""

    mean_dir: np.ndarray
    sym_dir: np.ndarray

    def __post_init__(self):
        self.mean_dir = np.asarray(self.mean_dir, dtype=np.float64).reshape(-1)
        self.sym_dir = np.asarray(self.sym_dir, dtype=np.float64)
        d = self.mean_dir.shape[0]
        if self.sym_dir.shape != (d, d):
            raise DimensionError("sym_dir shape does not match mean_dir dim")
        if not symmat.is_symmetric(
            self.sym_dir, tol=1e-12 * max(1.0, symmat.frobenius(self.sym_dir))
        ):
            raise ValidationError("sym_dir is not symmetric")
        self.sym_dir = symmat.symmetrize(self.sym_dir)

    @property
    def dim(self) -> int:
        return self.mean_dir.shape[0]

    @classmethod
    def zero(cls, d: int) -> "TangentVector":
        return cls(np.zeros(d), np.zeros((d, d)))

    def scaled(self, t: float) -> "TangentVector":
        return TangentVector(t * self.mean_dir, t * self.sym_dir)


@dataclass
class EmpiricalLaw:
    """Finitely supported measure on the manifold: (weight, point) atoms."""

    atoms: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.atoms) == 0:
            raise ValidationError("empirical law needs at least one atom")
        total = sum(w for w, _ in self.atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"atom weights sum to {total!r}, not 1")
        for w, _ in self.atoms:
            if not (0.0 < w <= 1.0):
                raise ValidationError(f"atom weight {w!r} outside (0, 1]")

    @classmethod
    def equal_weights(cls, points) -> "EmpiricalLaw":
        points = list(points)
        w = 1.0 / len(points)
        law = cls.__new__(cls)
        law.atoms = [(w, p) for p in points]
        # weights are exact by construction; re-run the check anyway
        law.__post_init__()
        return law


def _check_same_dim(p: GaussianPoint, q: GaussianPoint):
    if p.dim != q.dim:
        raise DimensionError(f"dimension mismatch: {p.dim} vs {q.dim}")


def distance(p: GaussianPoint, q: GaussianPoint, eig_floor: float = EIG_FLOOR) -> float:
    """Geodesic distance; see the module docstring for the closed form."""
    _check_same_dim(p, q)
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    c = symmat.inv_sqrt(p.cov, eig_floor=eig_floor)
    w = c @ q.cov @ c
    lam = np.linalg.eigvalsh(symmat.symmetrize(w))
    lam = symmat.checked_eigvals(lam, eig_floor, False, "distance")
    dm = p.mean - q.mean
    return float(np.sqrt(dm @ dm + 0.5 * np.sum(np.log(lam) ** 2)))


def tangent_norm(p: GaussianPoint, v: TangentVector, eig_floor: float = EIG_FLOOR) -> float:
    """Metric norm of a tangent vector at p."""
    c = symmat.inv_sqrt(p.cov, eig_floor=eig_floor)
    a = c @ v.sym_dir @ c
    return float(np.sqrt(v.mean_dir @ v.mean_dir + 0.5 * np.sum(a * a)))


def exp_map(p: GaussianPoint, v: TangentVector) -> GaussianPoint:
    """Riemannian exponential: follow the geodesic from p with velocity v."""
    if p.dim != v.dim:
        raise DimensionError("tangent dimension does not match base point")
    r = symmat.mat_pow(p.cov, 0.5)
    rinv = symmat.mat_pow(p.cov, -0.5)
    inner = symmat.mat_exp(symmat.symmetrize(rinv @ v.sym_dir @ rinv))
    return GaussianPoint(p.mean + v.mean_dir, symmat.symmetrize(r @ inner @ r))


def log_map(p: GaussianPoint, q: GaussianPoint, eig_floor: float = EIG_FLOOR) -> TangentVector:
    """Inverse of exp_map at p; globally defined because curvature is non-positive."""
    _check_same_dim(p, q)
    r = symmat.mat_pow(p.cov, 0.5, eig_floor=eig_floor)
    rinv = symmat.mat_pow(p.cov, -0.5, eig_floor=eig_floor)
    inner = symmat.mat_log(
        symmat.symmetrize(rinv @ q.cov @ rinv), eig_floor=eig_floor
    )
    return TangentVector(q.mean - p.mean, symmat.symmetrize(r @ inner @ r))


def geodesic_point(p: GaussianPoint, q: GaussianPoint, t: float) -> GaussianPoint:
    """Point at parameter t on the geodesic from p (t=0) to q (t=1)."""
    return exp_map(p, log_map(p, q).scaled(t))


def karcher_mean(
    law: EmpiricalLaw,
    tol: float = 1e-10,
    max_iter: int = 200,
    eig_floor: float = EIG_FLOOR,
) -> GaussianPoint:
    """Barycenter of a finitely supported law.

    Fixed-point iteration started at the heaviest atom (first on ties); the
    returned point satisfies first-order optimality: the weighted mean of
    log_map(z, atom_i) has metric norm below tol.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    weights = np.array([w for w, _ in law.atoms])
    points = [p for _, p in law.atoms]
    z = points[int(np.argmax(weights))]
    if len(points) == 1:
        return z

    d = z.dim
    means = np.stack([p.mean for p in points])
    covs = np.stack([p.cov for p in points])

    last = np.inf
    for _ in range(max_iter):
        r = symmat.mat_pow(z.cov, 0.5, eig_floor=eig_floor)
        rinv = symmat.mat_pow(z.cov, -0.5, eig_floor=eig_floor)
        inner = symmat.symmetrize(rinv @ covs @ rinv)
        vals, q = symmat.spectral_decompose(inner)
        vals = symmat.checked_eigvals(vals, eig_floor, False, "karcher_mean")
        logs = q @ (np.log(vals)[..., :, None] * np.swapaxes(q, -1, -2))
        sym_step = symmat.symmetrize(r @ np.einsum("k,kij->ij", weights, logs) @ r)
        mean_step = weights @ (means - z.mean)
        step = TangentVector(mean_step, sym_step)
        last = tangent_norm(z, step, eig_floor=eig_floor)
        if last < tol:
            return z
        z = exp_map(z, step)
    raise ConvergenceError(
        f"karcher_mean: no convergence in {max_iter} iterations "
        f"(last gradient norm {last:.3e})",
        last_residual=last,
    )


def wasserstein1_two_atom(law_p: EmpiricalLaw, law_q: EmpiricalLaw) -> float:
    """Exact 1-Wasserstein distance between two laws with at most two atoms
    each, by enumerating the extreme couplings.

    For 2x2 marginals the transport polytope is a segment, so the minimum is
    attained at one of its two endpoints.
    """
    if len(law_p.atoms) > 2 or len(law_q.atoms) > 2:
        raise ValidationError("exact W1 implemented for laws with at most 2 atoms")
    pw = [w for w, _ in law_p.atoms]
    qw = [w for w, _ in law_q.atoms]
    pp = [x for _, x in law_p.atoms]
    qq = [x for _, x in law_q.atoms]
    while len(pw) < 2:
        pw.append(0.0)
        pp.append(pp[0])
    while len(qw) < 2:
        qw.append(0.0)
        qq.append(qq[0])
    dmat = np.array([[distance(a, b) for b in qq] for a in pp])
    a, b = pw[0], qw[0]
    lo = max(0.0, a + b - 1.0)
    hi = min(a, b)
    best = np.inf
    for g in (lo, hi):
        cost = (
            g * dmat[0, 0]
            + (a - g) * dmat[0, 1]
            + (b - g) * dmat[1, 0]
            + (1.0 - a - b + g) * dmat[1, 1]
        )
        best = min(best, cost)
    return float(best)
