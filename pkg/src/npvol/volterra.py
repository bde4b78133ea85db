"""Discrete-time Volterra processes with non-singular diffusion.

The state evolves as

    x_{t+1} = x_t + drift(t, x_[0:t]) + diffusion(t, x_[0:t], s_[0:t]) @ w_t

where w_t is standard Gaussian white noise, the drift is a kernel-weighted
sum of a coefficient mu over past states, and the diffusion is the matrix
exponential of half the kernel-weighted sum of a symmetric coefficient
sigma plus a latent symmetric factor process s.

Kernel contract: kappa(t, 0) == 0 and 0 <= sum_r kappa(t, r) <= 1 for every
t > 0.  (The strict lower bound is relaxed to allow delay kernels, whose
support is empty until t exceeds the delay; their drift and log-diffusion
are simply zero there.)

Paths carry an extra leading state at index -1.  It never enters the
dynamics; it exists so that sliding input windows of length two are defined
from t = 0 onward.

Determinism: each path draws from its own counter-based stream keyed by
(seed, path index), in the fixed order init draws, factor path, then noise,
so results are independent of batching and thread count.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng, symmat
from .errors import DimensionError, SimulationError, ValidationError

MAGIC_PATHS = b"NPVS1"


# ---------------------------------------------------------------------------
# kernels


class Kernel:
    """Base class: weights(t) returns the array (kappa(t, 0), ..., kappa(t, t))."""

    def weights(self, t: int) -> np.ndarray:
        raise NotImplementedError

    def weight(self, t: int, r: int) -> float:
        if r < 0 or r > t:
            raise ValidationError(f"kernel weight requested outside domain: r={r}, t={t}")
        return float(self.weights(t)[r])


@dataclass
class ExponentialDecayKernel(Kernel):
    """kappa(t, r) proportional to c * alpha**(t-r), rescaled per t so the
    weights sum to at most 1 (the raw geometric sum can exceed it)."""

    c: float
    alpha: float

    def __post_init__(self):
        if not (self.c > 0):
            raise ValidationError("exponential kernel needs c > 0")
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("exponential kernel needs alpha in (0, 1)")

    def weights(self, t: int) -> np.ndarray:
        if t == 0:
            return np.array([min(self.c, 1.0)])
        w = np.zeros(t + 1)
        r = np.arange(1, t + 1)
        w[1:] = self.c * self.alpha ** (t - r)
        total = w.sum()
        if total > 1.0:
            w /= total
        return w


@dataclass
class PolynomialDecayKernel(Kernel):
    """kappa(t, r) proportional to c * (t-r)**alpha for r < t, with the
    current state weighted c; rescaled per t to keep the sum at most 1.

    The decay lemmas assume alpha < -1; smaller decays (alpha in [-1, 0))
    are accepted but fall outside that regime.
    """

    c: float
    alpha: float

    def __post_init__(self):
        if not (self.c > 0):
            raise ValidationError("polynomial kernel needs c > 0")
        if not (self.alpha < 0):
            raise ValidationError("polynomial kernel needs alpha < 0")

    def weights(self, t: int) -> np.ndarray:
        if t == 0:
            return np.array([min(self.c, 1.0)])
        w = np.zeros(t + 1)
        w[t] = self.c
        r = np.arange(1, t)
        if r.size:
            w[1:t] = self.c * (t - r).astype(np.float64) ** self.alpha
        total = w.sum()
        if total > 1.0:
            w /= total
        return w


@dataclass
class DelayKernel(Kernel):
    """Unit weight on the single state n_tau steps back, nothing else.

    Support is empty while t <= n_tau (the lag would land on the excluded
    r = 0 slot or before the start of the path).
    """

    n_tau: int

    def __post_init__(self):
        if self.n_tau < 1:
            raise ValidationError("delay kernel needs n_tau >= 1")

    def weights(self, t: int) -> np.ndarray:
        w = np.zeros(t + 1)
        r = t - self.n_tau
        if r >= 1:
            w[r] = 1.0
        return w


@dataclass
class TwoStepKernel(Kernel):
    """Weight w on the current state and 1 - w on the previous one."""

    w: float

    def __post_init__(self):
        if not (0.0 < self.w <= 1.0):
            raise ValidationError("two-step kernel needs w in (0, 1]")

    def weights(self, t: int) -> np.ndarray:
        out = np.zeros(t + 1)
        out[t] = self.w
        if t - 1 >= 1:
            out[t - 1] = 1.0 - self.w
        return out


@dataclass
class TableKernel(Kernel):
    """Explicit weights: rows[t] maps r to kappa(t, r); missing entries are 0."""

    rows: dict

    def weights(self, t: int) -> np.ndarray:
        w = np.zeros(t + 1)
        for r, val in self.rows.get(t, {}).items():
            if r < 0 or r > t:
                raise ValidationError(f"table kernel row t={t} has r={r} outside [0, t]")
            w[r] = val
        return w


def validate_kernel(kernel: Kernel, horizon: int = 64):
    """Check the kernel contract for t = 1..horizon.

    A zero total is tolerated only when every weight is zero (empty support,
    as for delay kernels early on).
    """
    for t in range(1, horizon + 1):
        w = kernel.weights(t)
        if w.shape != (t + 1,):
            raise ValidationError(f"kernel weights(t={t}) has shape {w.shape}")
        if w[0] != 0.0:
            raise ValidationError(f"kernel violates kappa(t, 0) == 0 at t={t}: {w[0]!r}")
        if np.any(w < 0):
            raise ValidationError(f"negative kernel weight at t={t}")
        total = float(w.sum())
        if total > 1.0 + 1e-12:
            raise ValidationError(f"kernel weights sum to {total!r} > 1 at t={t}")


def kernel_weight(kernel: Kernel, t: int, r: int) -> float:
    return kernel.weight(t, r)


# ---------------------------------------------------------------------------
# latent factor


class Factor:
    """Latent symmetric-matrix process.  sample(t, gen, d) must stay within
    the Frobenius bound reported by bound(d), almost surely."""

    def sample(self, t: int, gen: np.random.Generator, d: int) -> np.ndarray:
        raise NotImplementedError

    def bound(self, d: int) -> float:
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False


@dataclass
class ZeroFactor(Factor):
    def sample(self, t, gen, d):
        return np.zeros((d, d))

    def bound(self, d):
        return 0.0

    @property
    def is_zero(self):
        return True


@dataclass
class BernoulliScaledFactor(Factor):
    """lam * B_t * I with B_t an i.i.d. fair coin."""

    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("bernoulli factor needs lam >= 0")

    def sample(self, t, gen, d):
        b = rng.bernoulli(gen)
        return self.lam * b * np.eye(d)

    def bound(self, d):
        return self.lam * np.sqrt(d)

    @property
    def is_zero(self):
        return self.lam == 0.0


def sample_factor_path(factor: Factor, big_t: int, gen: np.random.Generator, d: int) -> np.ndarray:
    """Factor states s_0, ..., s_T as an array (T+1, d, d)."""
    if big_t < 0:
        raise ValidationError("horizon must be nonnegative")
    return np.stack([factor.sample(t, gen, d) for t in range(big_t + 1)])


# ---------------------------------------------------------------------------
# process spec


@dataclass
class VolterraSpec:
    """Full process definition.

    mu(t, x) -> (..., d) and sigma(t, x) -> (..., d, d) must broadcast over a
    leading batch axis of states.  bound_m caps the Frobenius norm of sigma
    (spot-checked on a probe grid); bound_r is the almost-sure factor bound.
    """

    d: int
    mu: Callable[[int, np.ndarray], np.ndarray]
    sigma: Callable[[int, np.ndarray], np.ndarray]
    kernel: Kernel
    factor: Factor
    bound_m: float
    bound_r: float
    x0: Optional[np.ndarray] = None
    init: str = "fixed"  # "fixed" -> x_{-1} = x_0 = x0; "standard_normal" -> both drawn
    closed_form: object = None  # optional two-atom parameter pack, set by harness builders

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("dimension must be positive")
        if self.init not in ("fixed", "standard_normal"):
            raise ValidationError(f"unknown init mode {self.init!r}")
        self.x0 = np.zeros(self.d) if self.x0 is None else np.asarray(self.x0, float).reshape(-1)
        if self.x0.shape != (self.d,):
            raise DimensionError("x0 has wrong dimension")
        if self.bound_r < self.factor.bound(self.d) - 1e-12:
            raise ValidationError(
                f"bound_r={self.bound_r} below the factor's own bound {self.factor.bound(self.d)}"
            )

    def validate(self, probe_states: int = 16, probe_times=(0, 1, 2, 5), probe_seed: int = 0):
        """Spot-check the sigma bound on a small random probe grid."""
        gen = rng.stream(probe_seed, "sigma-probe")
        xs = 3.0 * rng.normals(gen, (probe_states, self.d))
        for t in probe_times:
            s = np.asarray(self.sigma(t, xs))
            if s.shape != (probe_states, self.d, self.d):
                raise ValidationError(
                    f"sigma(t, x) returned shape {s.shape}, expected (batch, d, d)"
                )
            norms = np.sqrt(np.sum(s * s, axis=(-2, -1)))
            if float(norms.max()) > self.bound_m + 1e-9:
                raise ValidationError(
                    f"sigma Frobenius norm {float(norms.max()):.6g} exceeds bound_m={self.bound_m}"
                )
        validate_kernel(self.kernel)


# ---------------------------------------------------------------------------
# coefficient evaluation


def drift(spec: VolterraSpec, t: int, path: np.ndarray) -> np.ndarray:
    """Kernel-weighted drift over the realized states path = x_[0:t]."""
    path = np.asarray(path, dtype=np.float64)
    if path.shape[-2] != t + 1:
        raise DimensionError(f"path must hold t+1={t + 1} states, got {path.shape[-2]}")
    if path.shape[-1] != spec.d:
        raise DimensionError("state dimension mismatch")
    w = spec.kernel.weights(t)
    out = np.zeros(path.shape[:-2] + (spec.d,))
    for r in np.nonzero(w)[0]:
        out = out + w[r] * np.asarray(spec.mu(t, path[..., r, :]))
    return out


def diffusion_tangent(
    spec: VolterraSpec, t: int, path: np.ndarray, s_path: np.ndarray
) -> np.ndarray:
    """Half the kernel-weighted sum of sigma plus the factor states
    (the matrix logarithm of the diffusion)."""
    path = np.asarray(path, dtype=np.float64)
    s_path = np.asarray(s_path, dtype=np.float64)
    if path.shape[-2] != t + 1 or s_path.shape[-3] != t + 1:
        raise DimensionError("path and factor path must both hold t+1 entries")
    w = spec.kernel.weights(t)
    out = np.zeros(path.shape[:-2] + (spec.d, spec.d))
    for r in np.nonzero(w)[0]:
        term = np.asarray(spec.sigma(t, path[..., r, :])) + s_path[..., r, :, :]
        out = out + (0.5 * w[r]) * term
    return symmat.symmetrize(out)


def diffusion(spec: VolterraSpec, t: int, path: np.ndarray, s_path: np.ndarray) -> np.ndarray:
    """SPD diffusion matrix, the exponential of the tangent."""
    return symmat.mat_exp(diffusion_tangent(spec, t, path, s_path))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class PathSet:
    """Simulated paths, states indexed t = -1..T (so states has T+2 columns)."""

    n_paths: int
    horizon: int
    states: np.ndarray  # (N, T+2, d)
    factor_paths: Optional[np.ndarray]  # (N, T+1, d, d) or None
    seed: int

    @property
    def d(self) -> int:
        return self.states.shape[-1]

    def state(self, n: int, t: int) -> np.ndarray:
        """State of path n at time t, t = -1..T."""
        return self.states[n, t + 1]

    def window(self, n: int, t: int, length: int) -> np.ndarray:
        """States x_{t-length+1}, ..., x_t of path n (needs t-length+1 >= -1)."""
        a = t + 1
        if a - length + 1 < 0:
            raise DimensionError(f"window of length {length} does not exist at t={t}")
        return self.states[n, a - length + 1 : a + 1]

    def windows(self, t: int, length: int) -> np.ndarray:
        """All paths' windows at time t, shape (N, length, d)."""
        a = t + 1
        if a - length + 1 < 0:
            raise DimensionError(f"window of length {length} does not exist at t={t}")
        return self.states[:, a - length + 1 : a + 1, :]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        has_factor = self.factor_paths is not None
        buf.write(MAGIC_PATHS)
        buf.write(
            struct.pack(
                "<BIQQQB", 1, self.d, self.n_paths, self.horizon, self.seed, int(has_factor)
            )
        )
        buf.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
        if has_factor:
            buf.write(np.ascontiguousarray(self.factor_paths, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "PathSet":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PathSet":
        if raw[:5] != MAGIC_PATHS:
            raise ValidationError("not a path-set file (bad magic)")
        ver, d, n, big_t, seed, has_factor = struct.unpack_from("<BIQQQB", raw, 5)
        if ver != 1:
            raise ValidationError(f"unsupported path-set version {ver}")
        off = 5 + struct.calcsize("<BIQQQB")
        n_states = n * (big_t + 2) * d
        states = np.frombuffer(raw, dtype="<f8", count=n_states, offset=off)
        states = states.reshape(n, big_t + 2, d).copy()
        factor = None
        if has_factor:
            off += n_states * 8
            n_fac = n * (big_t + 1) * d * d
            factor = np.frombuffer(raw, dtype="<f8", count=n_fac, offset=off)
            factor = factor.reshape(n, big_t + 1, d, d).copy()
        return cls(int(n), int(big_t), states, factor, int(seed))

    def to_csv(self, path):
        d = self.d
        with open(path, "w") as fh:
            fh.write("path,t," + ",".join(f"x{i + 1}" for i in range(d)) + "\n")
            for n in range(self.n_paths):
                for t in range(-1, self.horizon + 1):
                    vals = ",".join(repr(float(v)) for v in self.state(n, t))
                    fh.write(f"{n},{t},{vals}\n")


def simulate_paths(spec: VolterraSpec, n_paths: int, horizon: int, seed: int) -> PathSet:
    """Simulate n_paths independent paths up to time T = horizon.

    Per-path draw order is: initial states (only in standard_normal mode),
    the factor path s_0..s_T, then the Gaussian noise w_0..w_{T-1}.
    """
    if n_paths < 1 or horizon < 1:
        raise ValidationError("need n_paths >= 1 and horizon >= 1")
    spec.validate()
    d, big_t = spec.d, horizon

    states = np.empty((n_paths, big_t + 2, d))
    factors = np.empty((n_paths, big_t + 1, d, d))
    noise = np.empty((n_paths, big_t, d))

    def gen_path(n):
        gen = rng.stream(seed, "path", n)
        if spec.init == "standard_normal":
            init = rng.normals(gen, (2, d))
        else:
            init = np.stack([spec.x0, spec.x0])
        fac = sample_factor_path(spec.factor, big_t, gen, d)
        w = rng.normals(gen, (big_t, d))
        return init, fac, w

    for n, (init, fac, w) in enumerate(rng.parallel_map(gen_path, range(n_paths))):
        states[n, 0] = init[0]
        states[n, 1] = init[1]
        factors[n] = fac
        noise[n] = w

    for t in range(big_t):
        path = states[:, 1 : t + 2, :]  # x_0..x_t for all paths
        s_path = factors[:, : t + 1]
        mu_t = drift(spec, t, path)
        diff_t = diffusion(spec, t, path, s_path)
        nxt = states[:, t + 1, :] + mu_t + np.einsum("nij,nj->ni", diff_t, noise[:, t, :])
        if not np.all(np.isfinite(nxt)):
            bad = int(np.argwhere(~np.all(np.isfinite(nxt), axis=1))[0, 0])
            raise SimulationError(f"non-finite state at path n={bad}, t={t + 1}")
        states[:, t + 2, :] = nxt

    kept_factors = None if spec.factor.is_zero else factors
    return PathSet(n_paths, big_t, states, kept_factors, seed)
