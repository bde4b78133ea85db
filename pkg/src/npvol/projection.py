"""Projection of a Volterra process's conditional law onto the Gaussian manifold.

Given a realized path, the next state's conditional law is Gaussian once the
latent factor path is known:

    next_state_law(t, x_[0:t], s_[0:t])
        = N(x_t + drift, exp(sum_r kappa(t, r) [sigma(t, x_r) + s_r]))

With the factor unobserved, the projection is the barycenter of the law of
next_state_law over random factor paths.  Two routes are provided:

  * project_monte_carlo: sample factor paths, take the Karcher mean of the
    resulting atoms.  With a zero factor all atoms coincide and the result
    is exact.
  * project_two_atom_closed_form: the closed-form barycenter for the
    bernoulli-factor experiment process, whose conditional law has exactly
    two equally likely states.

Truncated projections zero-pad the path outside a trailing window; the
decay-rate bounds quantify how fast the discarded history stops mattering.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng, symmat, volterra
from .errors import DimensionError, SingularMatrixError, ValidationError
from .manifold import EmpiricalLaw, GaussianPoint, karcher_mean
from .symmat import EIG_FLOOR

MAGIC_TARGETS = b"NPPT1"


@dataclass
class ProjectionMode:
    """How targets are produced: 'closed_form' or 'monte_carlo' (with nature samples)."""

    kind: str
    n_samples: int = 1024
    karcher_tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("closed_form", "monte_carlo"):
            raise ValidationError(f"unknown projection mode {self.kind!r}")
        if self.kind == "monte_carlo" and self.n_samples < 1:
            raise ValidationError("monte_carlo mode needs n_samples >= 1")

    @classmethod
    def parse(cls, text: str) -> "ProjectionMode":
        """Parse CLI syntax: 'closed_form' or 'mc:<n>'."""
        if text == "closed_form":
            return cls("closed_form")
        if text.startswith("mc:"):
            return cls("monte_carlo", n_samples=int(text[3:]))
        if text == "mc":
            return cls("monte_carlo")
        raise ValidationError(f"cannot parse projection mode {text!r}")

    def label(self) -> str:
        return self.kind if self.kind == "closed_form" else f"mc:{self.n_samples}"


def next_state_law(
    spec: volterra.VolterraSpec, t: int, path: np.ndarray, s_path: np.ndarray
) -> GaussianPoint:
    """Gaussian conditional law of x_{t+1} given the path and factor path."""
    path = np.asarray(path, dtype=np.float64)
    mean = path[-1] + volterra.drift(spec, t, path)
    tang = volterra.diffusion_tangent(spec, t, path, s_path)
    cov = symmat.mat_exp(2.0 * tang)
    return GaussianPoint(mean, cov)


def project_monte_carlo(
    spec: volterra.VolterraSpec,
    t: int,
    path: np.ndarray,
    n_samples: int,
    seed: int,
    karcher_tol: float = 1e-10,
) -> GaussianPoint:
    """Barycenter of the law over sampled factor paths; deterministic in seed."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    gen = rng.stream(seed, "mc-projection")
    atoms = []
    for _ in range(n_samples):
        s_path = volterra.sample_factor_path(spec.factor, t, gen, spec.d)
        atoms.append(next_state_law(spec, t, path, s_path))
    return karcher_mean(EmpiricalLaw.equal_weights(atoms), tol=karcher_tol)


# ---------------------------------------------------------------------------
# the two-atom experiment process


@dataclass
class TwoAtomParams:
    """Parameters of the bernoulli-factor experiment process.

    drift_fn maps states (..., d) -> (..., d); vol_scale_fn maps states to a
    positive scalar field (..., ); vol_matrix is a fixed SPD d x d matrix;
    factor_scale >= 0 is the bernoulli jump size; drift_weight in (0, 1] is
    the weight on the current state (the remainder falls on the previous one).
    """

    drift_fn: Callable[[np.ndarray], np.ndarray]
    vol_scale_fn: Callable[[np.ndarray], np.ndarray]
    vol_matrix: np.ndarray
    factor_scale: float
    drift_weight: float

    def __post_init__(self):
        self.vol_matrix = np.asarray(self.vol_matrix, dtype=np.float64)
        if self.vol_matrix.ndim != 2 or self.vol_matrix.shape[0] != self.vol_matrix.shape[1]:
            raise DimensionError("vol_matrix must be square")
        if not symmat.is_spd(self.vol_matrix):
            raise SingularMatrixError("vol_matrix must be SPD")
        if self.factor_scale < 0:
            raise ValidationError("factor_scale must be >= 0")
        if not (0.0 < self.drift_weight <= 1.0):
            raise ValidationError("drift_weight must lie in (0, 1]")

    @property
    def d(self) -> int:
        return self.vol_matrix.shape[0]


def _two_atom_mean(params: TwoAtomParams, window: np.ndarray) -> np.ndarray:
    prev, cur = window[..., 0, :], window[..., 1, :]
    w = params.drift_weight
    return cur + w * np.asarray(params.drift_fn(cur)) + (1.0 - w) * np.asarray(
        params.drift_fn(prev)
    )


def _vol_scale(params: TwoAtomParams, cur: np.ndarray) -> np.ndarray:
    s = np.asarray(params.vol_scale_fn(cur), dtype=np.float64)
    if np.any(s <= 0):
        raise ValidationError("vol_scale_fn must be strictly positive")
    return s


def two_atom_law(params: TwoAtomParams, window: np.ndarray) -> EmpiricalLaw:
    """The two equally likely conditional-law states of the experiment process."""
    window = np.asarray(window, dtype=np.float64)
    mean = _two_atom_mean(params, window)
    s = float(_vol_scale(params, window[1]))
    sig = params.vol_matrix
    lo = (s * sig) @ (s * sig)
    bumped = s * sig + params.factor_scale * np.eye(params.d)
    hi = bumped @ bumped
    return EmpiricalLaw(
        [(0.5, GaussianPoint(mean, lo)), (0.5, GaussianPoint(mean, hi))]
    )


def _two_atom_cov_eigvals(params: TwoAtomParams, scale: np.ndarray, sig_vals: np.ndarray):
    """Eigenvalues of the barycenter covariance for vol scales (...,):
    scale * s_i * (lam + scale * s_i) per eigendirection s_i of vol_matrix."""
    lam = params.factor_scale
    return scale[..., None] * sig_vals * (lam + scale[..., None] * sig_vals)


def project_two_atom_closed_form(params: TwoAtomParams, window: np.ndarray) -> GaussianPoint:
    """Closed-form barycenter of the two-atom conditional law.

    mean = x_t + w mu(x_t) + (1-w) mu(x_{t-1});
    cov  = s sigma^2 (sigma^{-2} (lam I + s sigma)^2)^{1/2}  with s = vol scale
    at x_t.  All covariance factors are polynomials in sigma, so the product
    is evaluated in sigma's eigenbasis: eigenvalue s_i maps to
    s * s_i * (lam + s * s_i).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (2, params.d):
        raise DimensionError(f"window must have shape (2, {params.d})")
    mean = _two_atom_mean(params, window)
    s = float(_vol_scale(params, window[1]))
    sig_vals, q = symmat.spectral_decompose(params.vol_matrix)
    sig_vals = symmat.checked_eigvals(sig_vals, EIG_FLOOR, False, "two-atom projection")
    cov_vals = _two_atom_cov_eigvals(params, np.asarray(s), sig_vals)
    cov = q @ (cov_vals[..., :, None] * q.T)
    return GaussianPoint(mean, symmat.symmetrize(cov))


def _two_atom_targets_batch(params: TwoAtomParams, windows: np.ndarray):
    """Vectorized closed form over windows (..., 2, d); returns (means, covs)."""
    means = _two_atom_mean(params, windows)
    scales = _vol_scale(params, windows[..., 1, :])
    sig_vals, q = symmat.spectral_decompose(params.vol_matrix)
    sig_vals = symmat.checked_eigvals(sig_vals, EIG_FLOOR, False, "two-atom projection")
    cov_vals = _two_atom_cov_eigvals(params, scales, sig_vals)
    covs = np.einsum("ik,...k,jk->...ij", q, cov_vals, q)
    return means, symmat.symmetrize(covs)


# ---------------------------------------------------------------------------
# per-path target sequences


@dataclass
class ProjectionTargets:
    """One projected Gaussian per (path, time), aligned with a PathSet."""

    means: np.ndarray  # (N, T+1, d)
    covs: np.ndarray  # (N, T+1, d, d)
    mode_label: str
    seed: int

    @property
    def n_paths(self) -> int:
        return self.means.shape[0]

    @property
    def horizon(self) -> int:
        return self.means.shape[1] - 1

    @property
    def d(self) -> int:
        return self.means.shape[-1]

    def point(self, n: int, t: int) -> GaussianPoint:
        return GaussianPoint(self.means[n, t], self.covs[n, t])

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC_TARGETS)
        kind = 0 if self.mode_label == "closed_form" else 1
        mc_n = 0 if kind == 0 else int(self.mode_label.split(":")[1])
        n, big_t, d = self.n_paths, self.horizon, self.d
        buf.write(struct.pack("<BIQQQBI", 1, d, n, big_t, self.seed, kind, mc_n))
        tri = symmat.vec(self.covs)  # (N, T+1, d(d+1)/2)
        rec = np.concatenate([self.means, tri], axis=-1)
        buf.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ProjectionTargets":
        if raw[:5] != MAGIC_TARGETS:
            raise ValidationError("not a projection-target file (bad magic)")
        ver, d, n, big_t, seed, kind, mc_n = struct.unpack_from("<BIQQQBI", raw, 5)
        if ver != 1:
            raise ValidationError(f"unsupported target-file version {ver}")
        off = 5 + struct.calcsize("<BIQQQBI")
        rec_len = d + symmat.tri_len(d)
        count = n * (big_t + 1) * rec_len
        rec = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        rec = rec.reshape(n, big_t + 1, rec_len)
        means = rec[..., :d].copy()
        covs = symmat.sym(rec[..., d:])
        low = np.min(np.linalg.eigvalsh(covs))
        if low <= EIG_FLOOR:
            raise SingularMatrixError(
                f"loaded target covariance has eigenvalue {float(low):.6g} at or below floor"
            )
        label = "closed_form" if kind == 0 else f"mc:{mc_n}"
        return cls(means, covs, label, int(seed))

    @classmethod
    def load(cls, path) -> "ProjectionTargets":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path):
        d = self.d
        tri = symmat.tri_len(d)
        head = (
            ["path", "t"]
            + [f"mean{i + 1}" for i in range(d)]
            + [f"cov{i + 1}" for i in range(tri)]
        )
        with open(path, "w") as fh:
            fh.write(",".join(head) + "\n")
            for n in range(self.n_paths):
                for t in range(self.horizon + 1):
                    rec = np.concatenate([self.means[n, t], symmat.vec(self.covs[n, t])])
                    fh.write(f"{n},{t}," + ",".join(repr(float(v)) for v in rec) + "\n")


def build_projection_targets(
    spec: volterra.VolterraSpec, paths: volterra.PathSet, mode: ProjectionMode
) -> ProjectionTargets:
    """Projected conditional law for every (path, time)."""
    if paths.d != spec.d:
        raise DimensionError("path set dimension does not match spec")
    n, big_t, d = paths.n_paths, paths.horizon, paths.d

    if mode.kind == "closed_form":
        params = spec.closed_form
        if params is None:
            raise ValidationError(
                "closed_form targets need a spec built with two-atom parameters"
            )
        # windows at every t: (N, T+1, 2, d)
        wins = np.stack([paths.windows(t, 2) for t in range(big_t + 1)], axis=1)
        means, covs = _two_atom_targets_batch(params, wins)
        return ProjectionTargets(means, covs, mode.label(), paths.seed)

    means = np.empty((n, big_t + 1, d))
    covs = np.empty((n, big_t + 1, d, d))

    def project_path(i):
        m = np.empty((big_t + 1, d))
        c = np.empty((big_t + 1, d, d))
        for t in range(big_t + 1):
            path = paths.states[i, 1 : t + 2, :]
            p = project_monte_carlo(
                spec,
                t,
                path,
                mode.n_samples,
                rng.derive_seed(paths.seed, "mc", i, t),
                karcher_tol=mode.karcher_tol,
            )
            m[t] = p.mean
            c[t] = p.cov
        return m, c

    for i, (m, c) in enumerate(rng.parallel_map(project_path, range(n))):
        means[i] = m
        covs[i] = c
    return ProjectionTargets(means, covs, mode.label(), paths.seed)


def truncated_projection(
    spec: volterra.VolterraSpec,
    t: int,
    memory: int,
    tail: np.ndarray,
    mode: ProjectionMode,
    seed: int = 0,
) -> GaussianPoint:
    """Projection of the zero-padded path (0, ..., 0, x_{t-memory}, ..., x_t)."""
    if not (0 <= memory < t):
        raise ValidationError("need 0 <= memory < t")
    tail = np.asarray(tail, dtype=np.float64)
    if tail.shape != (memory + 1, spec.d):
        raise DimensionError(f"tail must hold memory+1={memory + 1} states")
    padded = np.concatenate([np.zeros((t - memory, spec.d)), tail], axis=0)
    if mode.kind == "closed_form":
        if spec.closed_form is None:
            raise ValidationError("closed_form mode needs two-atom parameters")
        return project_two_atom_closed_form(spec.closed_form, padded[-2:])
    return project_monte_carlo(
        spec, t, padded, mode.n_samples, seed, karcher_tol=mode.karcher_tol
    )


def memory_decay_bound(
    kernel: volterra.Kernel, t: int, memory: int, diam: float, c: float
) -> float:
    """Theoretical truncation-error bound, up to the caller-supplied constant c.

    Exponential kernels: c * diam * (C a / (a - 1)) * (a**t - a**memory);
    polynomial kernels:  c * diam * C * (memory + 1)**a * (t - memory).
    The multiplicative constant is not computable a priori, so only the
    shape in (t, memory) is meaningful; fit c empirically.
    """
    if not (0 <= memory < t):
        raise ValidationError("need 0 <= memory < t")
    if isinstance(kernel, volterra.ExponentialDecayKernel):
        a = kernel.alpha
        shape = (kernel.c * a / (a - 1.0)) * (a ** t - a ** memory)
    elif isinstance(kernel, volterra.PolynomialDecayKernel):
        shape = kernel.c * (memory + 1.0) ** kernel.alpha * (t - memory)
    else:
        raise ValidationError("decay bound defined for exponential or polynomial kernels")
    return c * diam * float(shape)
