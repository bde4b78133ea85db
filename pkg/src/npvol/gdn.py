"""Static geometric deep network: Euclidean window in, Gaussian measure out.

The model reads a window of recent states, subtracts trainable base offsets
(the log map of the flat input space), runs a ReLU MLP, interprets the last
affine output as a tangent vector (mean direction, packed symmetric matrix
direction) at a trainable base Gaussian, and returns the exponential map of
that tangent.  With all parameters zero the output is the anchor point
N(0, I) for every input.

Training minimizes the intrinsic mean squared error: the sum of squared
geodesic distances between predictions and target Gaussians.  Gradients are
exact, by reverse accumulation; derivatives through the symmetric-matrix
exponential use the eigenbasis divided-difference rule

    (D exp(S)[H])_ij = H~_ij * (e^{l_i} - e^{l_j}) / (l_i - l_j)

(with the diagonal limit e^{l_i}), and the distance term contributes
Q diag(log w_i / w_i) Q^T through the whitened covariance's eigenvalues.
A finite-difference test pins the whole chain.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from . import nets, symmat
from .errors import (
    DimensionError,
    OptimizerError,
    TrainingError,
    ValidationError,
)
from .manifold import GaussianPoint
from .rng import stream
from .symmat import EIG_FLOOR

MAGIC_GDN = b"NPGD1"


@dataclass
class GdnArch:
    """Architecture: window of input states, MLP widths, output manifold dim.

    widths must start at window * state_dim and end at the tangent dimension
    out_dim + out_dim(out_dim+1)/2 of the output manifold.
    """

    state_dim: int
    window: int
    out_dim: int
    widths: Tuple[int, ...]
    train_base_points: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.window < 1 or self.state_dim < 1 or self.out_dim < 1:
            raise ValidationError("window, state_dim and out_dim must be positive")
        if len(self.widths) < 2:
            raise ValidationError("need at least an input and an output width")
        if self.widths[0] != self.window * self.state_dim:
            raise ValidationError(
                f"first width {self.widths[0]} != window*state_dim = "
                f"{self.window * self.state_dim}"
            )
        if self.widths[-1] != self.tangent_dim:
            raise ValidationError(
                f"last width {self.widths[-1]} != tangent dim {self.tangent_dim}"
            )

    @property
    def tangent_dim(self) -> int:
        return self.out_dim + symmat.tri_len(self.out_dim)

    @property
    def param_count(self) -> int:
        return self.window * self.state_dim + self.tangent_dim + nets.mlp_param_count(self.widths)

    @classmethod
    def for_process(cls, state_dim: int, out_dim: int, window: int = 2, hidden=(64, 64, 64)):
        d0 = window * state_dim
        d_out = out_dim + symmat.tri_len(out_dim)
        return cls(state_dim, window, out_dim, (d0, *hidden, d_out))

    def descriptor(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "window": self.window,
            "out_dim": self.out_dim,
            "widths": list(self.widths),
            "train_base_points": self.train_base_points,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "GdnArch":
        return cls(
            desc["state_dim"],
            desc["window"],
            desc["out_dim"],
            tuple(desc["widths"]),
            desc.get("train_base_points", True),
        )


@dataclass
class GdnStruct:
    """Structured view of a flat parameter vector."""

    layers: list  # [(A_j, b_j), ...]
    input_offsets: np.ndarray  # (window, state_dim)
    output_offset: np.ndarray  # (tangent_dim,)


def unpack(theta: np.ndarray, arch: GdnArch) -> GdnStruct:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.param_count,):
        raise DimensionError(
            f"theta length {theta.shape} != param count {arch.param_count}"
        )
    n_mlp = nets.mlp_param_count(arch.widths)
    layers = nets.unpack_mlp(theta[:n_mlp], arch.widths)
    off = n_mlp
    n_in = arch.window * arch.state_dim
    x_off = theta[off : off + n_in].reshape(arch.window, arch.state_dim)
    off += n_in
    y_off = theta[off : off + arch.tangent_dim]
    return GdnStruct(layers, x_off, y_off)


def pack(struct: GdnStruct, arch: GdnArch) -> np.ndarray:
    flat = np.concatenate(
        [
            nets.pack_mlp(struct.layers),
            np.asarray(struct.input_offsets, float).reshape(-1),
            np.asarray(struct.output_offset, float).reshape(-1),
        ]
    )
    if flat.shape != (arch.param_count,):
        raise DimensionError("structured parameters do not match the architecture")
    return flat


def init_params(arch: GdnArch, seed: int, readout_scale: float = 1.0) -> np.ndarray:
    """Xavier-uniform weights; biases and base-point offsets zero.

    readout_scale multiplies the final affine layer's weights; zero makes
    every initial prediction sit exactly at the base point, which keeps the
    exponential readout tame when the base covariance is far from identity.
    """
    theta = np.zeros(arch.param_count)
    n_mlp = nets.mlp_param_count(arch.widths)
    theta[:n_mlp] = nets.init_mlp(arch.widths, seed)
    if readout_scale != 1.0:
        layers = nets.unpack_mlp(theta[:n_mlp], arch.widths)
        layers[-1][0][...] *= readout_scale
    return theta


def target_center_coords(dataset: "GdnDataset") -> np.ndarray:
    """Tangent coordinates (mean average, packed log-Euclidean covariance
    average) of a central Gaussian for a dataset's targets.

    Written into the readout bias, a zero-weight network already predicts
    this center: the model then learns residuals in log-covariance scale.
    Without it, target covariances far from the identity anchor cost the
    optimizer thousands of learning-rate-sized steps just to walk over.
    """
    mean_part = np.mean(dataset.target_means, axis=0)
    vals, q = symmat.spectral_decompose(dataset.target_covs)
    vals = symmat.checked_eigvals(vals, EIG_FLOOR, False, "target center")
    logs = q @ (np.log(vals)[..., :, None] * np.swapaxes(q, -1, -2))
    log_avg = symmat.symmetrize(np.mean(logs, axis=0))
    return np.concatenate([mean_part, symmat.vec(log_avg)])


def set_readout_bias(theta: np.ndarray, arch: GdnArch, value: np.ndarray) -> np.ndarray:
    """Copy of theta with the final affine layer's bias replaced."""
    value = np.asarray(value, dtype=np.float64).reshape(-1)
    if value.shape[0] != arch.tangent_dim:
        raise DimensionError("readout bias length does not match the tangent dimension")
    out = np.array(theta, dtype=np.float64, copy=True)
    n_mlp = nets.mlp_param_count(arch.widths)
    out[n_mlp - arch.tangent_dim : n_mlp] = value
    return out


# ---------------------------------------------------------------------------
# forward / loss / gradient


def _exp_dd(lam: np.ndarray) -> np.ndarray:
    """Divided-difference table for exp at eigenvalues lam (..., d)."""
    li = lam[..., :, None]
    lj = lam[..., None, :]
    delta = li - lj
    safe = np.where(delta == 0.0, 1.0, delta)
    table = np.exp(lj) * np.expm1(delta) / safe
    return np.where(delta == 0.0, np.exp(li), table)


def _spectral_fn(mats: np.ndarray, fn):
    vals, q = symmat.spectral_decompose(mats)
    return q @ (fn(vals)[..., :, None] * np.swapaxes(q, -1, -2)), (vals, q)


def _forward_arrays(theta: np.ndarray, arch: GdnArch, windows: np.ndarray, want_cache=False):
    """Batched forward: windows (B, window, state_dim) -> (means, covs[, cache])."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    b = windows.shape[0]
    if windows.shape[1:] != (arch.window, arch.state_dim):
        raise DimensionError(
            f"window batch shape {windows.shape[1:]} != ({arch.window}, {arch.state_dim})"
        )
    s = unpack(theta, arch)
    d = arch.out_dim

    feats = (windows - s.input_offsets[None]).reshape(b, -1)
    v, mlp_cache = nets.mlp_forward(s.layers, feats, want_cache=True)

    u = v[:, :d]
    x_sym = symmat.sym(v[:, d:])

    yh = 0.5 * symmat.sym(s.output_offset[d:])  # half-log of the base covariance
    yvals, yq = symmat.spectral_decompose(yh)
    r = yq @ (np.exp(yvals)[:, None] * yq.T)
    rinv = yq @ (np.exp(-yvals)[:, None] * yq.T)

    a = rinv @ x_sym @ rinv
    e, (avals, aq) = _spectral_fn(a, np.exp)
    covs = r @ e @ r
    means = s.output_offset[:d][None, :] + u

    if not want_cache:
        return means, covs
    cache = dict(
        struct=s,
        feats=feats,
        mlp_cache=mlp_cache,
        u=u,
        x_sym=x_sym,
        yvals=yvals,
        yq=yq,
        r=r,
        rinv=rinv,
        a=a,
        e=e,
        avals=avals,
        aq=aq,
        covs=covs,
        means=means,
        batch=b,
    )
    return means, covs, cache


def gdn_forward(theta: np.ndarray, arch: GdnArch, window: np.ndarray) -> GaussianPoint:
    """Prediction for a single input window (window, state_dim)."""
    means, covs = _forward_arrays(theta, arch, np.asarray(window)[None])
    return GaussianPoint(means[0], symmat.symmetrize(covs[0]))


@dataclass
class GdnDataset:
    """Training data at one time step: windows plus target Gaussians.

    Target whitening matrices (inverse square roots) are cached because the
    distance and its gradient need them at every evaluation.
    """

    windows: np.ndarray  # (B, window, state_dim)
    target_means: np.ndarray  # (B, d)
    target_covs: np.ndarray  # (B, d, d)
    target_isqrt: np.ndarray = field(default=None)  # (B, d, d)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.target_means = np.asarray(self.target_means, dtype=np.float64)
        self.target_covs = np.asarray(self.target_covs, dtype=np.float64)
        if self.target_isqrt is None:
            vals, q = symmat.spectral_decompose(self.target_covs)
            vals = symmat.checked_eigvals(vals, EIG_FLOOR, False, "target covariance")
            self.target_isqrt = q @ (
                (1.0 / np.sqrt(vals))[..., :, None] * np.swapaxes(q, -1, -2)
            )

    def __len__(self):
        return self.windows.shape[0]

    def subset(self, idx) -> "GdnDataset":
        return GdnDataset(
            self.windows[idx],
            self.target_means[idx],
            self.target_covs[idx],
            self.target_isqrt[idx],
        )

    @classmethod
    def from_pairs(cls, batch) -> "GdnDataset":
        wins = np.stack([np.asarray(w, float) for w, _ in batch])
        means = np.stack([p.mean for _, p in batch])
        covs = np.stack([p.cov for _, p in batch])
        return cls(wins, means, covs)


def _as_dataset(batch) -> GdnDataset:
    if isinstance(batch, GdnDataset):
        return batch
    if not batch:
        raise ValidationError("batch must be nonempty")
    return GdnDataset.from_pairs(list(batch))


def _loss_arrays(theta, arch, ds: GdnDataset, want_grad: bool, clamp: bool = False):
    means, covs, cache = _forward_arrays(theta, arch, ds.windows, want_cache=True)
    d = arch.out_dim
    cy = ds.target_isqrt
    dm = means - ds.target_means
    w = symmat.symmetrize(cy @ covs @ cy)
    wvals, wq = symmat.spectral_decompose(w)
    wvals = symmat.checked_eigvals(wvals, EIG_FLOOR, clamp, "prediction-target distance")
    lnw = np.log(wvals)
    losses = np.sum(dm * dm, axis=-1) + 0.5 * np.sum(lnw * lnw, axis=-1)
    loss = float(np.sum(losses))
    if not want_grad:
        return loss, losses, None

    s = cache["struct"]
    # distance gradient in coordinates
    g_means = 2.0 * dm
    g_w = wq @ ((lnw / wvals)[..., :, None] * np.swapaxes(wq, -1, -2))
    g_covs = cy @ g_w @ cy

    # covs = R E R with shared symmetric R
    r, rinv, e = cache["r"], cache["rinv"], cache["e"]
    g_e = r @ g_covs @ r
    g_r = np.sum(g_covs @ r @ e + e @ r @ g_covs, axis=0)

    # E = exp(A)
    f_exp = _exp_dd(cache["avals"])
    aq = cache["aq"]
    g_a = aq @ (f_exp * (np.swapaxes(aq, -1, -2) @ g_e @ aq)) @ np.swapaxes(aq, -1, -2)

    # A = Rinv X Rinv
    x_sym = cache["x_sym"]
    g_x = rinv @ g_a @ rinv
    g_rinv = np.sum(g_a @ rinv @ x_sym + x_sym @ rinv @ g_a, axis=0)

    # R = exp(Yh), Rinv = exp(-Yh), shared eigenbasis of Yh
    yvals, yq = cache["yvals"], cache["yq"]
    g_yh = yq @ (_exp_dd(yvals) * (yq.T @ g_r @ yq)) @ yq.T
    g_yh = g_yh - yq @ (_exp_dd(-yvals) * (yq.T @ g_rinv @ yq)) @ yq.T

    # fold matrix gradients back into packed tangent coordinates
    iu = np.triu_indices(d)
    scale = np.where(iu[0] == iu[1], 1.0, 2.0)

    g_v = np.empty((cache["batch"], arch.tangent_dim))
    g_v[:, :d] = g_means
    g_v[:, d:] = g_x[:, iu[0], iu[1]] * scale

    g_yoff = np.empty(arch.tangent_dim)
    g_yoff[:d] = np.sum(g_means, axis=0)
    g_yoff[d:] = 0.5 * g_yh[iu[0], iu[1]] * scale

    g_mlp, g_feats = nets.mlp_backward(s.layers, cache["mlp_cache"], g_v)
    g_xoff = -np.sum(g_feats.reshape(cache["batch"], arch.window, arch.state_dim), axis=0)

    if not arch.train_base_points:
        g_xoff = np.zeros_like(g_xoff)
        g_yoff = np.zeros_like(g_yoff)

    grad = np.concatenate([g_mlp, g_xoff.reshape(-1), g_yoff])
    return loss, losses, grad


def imse_loss(theta: np.ndarray, arch: GdnArch, batch) -> float:
    """Sum of squared geodesic distances between predictions and targets."""
    loss, _, _ = _loss_arrays(theta, arch, _as_dataset(batch), want_grad=False)
    return loss


def imse_per_sample(theta: np.ndarray, arch: GdnArch, batch) -> np.ndarray:
    _, losses, _ = _loss_arrays(theta, arch, _as_dataset(batch), want_grad=False)
    return losses


def imse_gradient(theta: np.ndarray, arch: GdnArch, batch) -> np.ndarray:
    """Exact gradient of imse_loss with respect to the flat parameters."""
    _, _, grad = _loss_arrays(theta, arch, _as_dataset(batch), want_grad=True)
    return grad


# ---------------------------------------------------------------------------
# optimizer and training


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def adam_step(
    state: AdamState,
    theta: np.ndarray,
    grad: np.ndarray,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip: float = 10.0,
):
    """One ADAM update with global gradient-norm clipping applied first."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionError("gradient and parameter lengths differ")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient")
    if clip > 0:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad = grad * (clip / norm)
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(step, m, v), theta_new


def adam_step_inplace(
    state: AdamState,
    theta: np.ndarray,
    grad: np.ndarray,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip: float = 10.0,
) -> AdamState:
    """Allocation-light ADAM that mutates theta and the moment buffers.

    Matches adam_step numerically; meant for million-parameter vectors where
    the functional version's copies dominate the epoch cost.
    """
    if grad.shape != theta.shape:
        raise DimensionError("gradient and parameter lengths differ")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient")
    if clip > 0:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad = grad * (clip / norm)
    state.step += 1
    m, v = state.m, state.v
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v)
    denom /= np.sqrt(1.0 - beta2 ** state.step)
    denom += eps
    update = m / denom
    update *= lr / (1.0 - beta1 ** state.step)
    theta -= update
    return state


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 10.0
    # clamp near-singular eigenvalues in the loss instead of raising; keeps
    # training alive through transient near-boundary predictions
    clamp_eigs: bool = False


def train_gdn(
    dataset: GdnDataset,
    arch: GdnArch,
    theta0: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    settings: Optional[TrainSettings] = None,
):
    """Minibatch ADAM on the intrinsic MSE; deterministic given the seed.

    Returns (best parameters, per-epoch loss trace).  "Best" is the lowest
    full-dataset loss seen at an epoch boundary, including the initial
    parameters, so a warm restart can never end worse than it began.
    """
    cfg = settings or TrainSettings()
    cfg = replace(cfg, epochs=epochs, batch_size=batch_size, lr=lr)
    ds = _as_dataset(dataset)
    if len(ds) == 0:
        raise ValidationError("dataset must be nonempty")
    theta = np.array(theta0, dtype=np.float64, copy=True)
    if theta.shape != (arch.param_count,):
        raise DimensionError("theta0 length does not match the architecture")

    best_theta = theta.copy()
    best_loss = imse_loss(theta, arch, ds)
    if not np.isfinite(best_loss):
        raise TrainingError("initial loss is non-finite")

    gen = stream(seed, "gdn-shuffle")
    state = AdamState.fresh(arch.param_count)
    trace: List[float] = []
    n = len(ds)
    for epoch in range(cfg.epochs):
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, _, grad = _loss_arrays(
                theta, arch, ds.subset(idx), want_grad=True, clamp=cfg.clamp_eigs
            )
            try:
                state, theta = adam_step(
                    state, theta, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip
                )
            except OptimizerError as e:
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch}, batch {start // cfg.batch_size}"
                ) from e
        loss, _, _ = _loss_arrays(theta, arch, ds, want_grad=False, clamp=cfg.clamp_eigs)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss after epoch {epoch}")
        trace.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
    return best_theta, trace


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, theta: np.ndarray, arch: GdnArch):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(theta, arch))


def checkpoint_bytes(theta: np.ndarray, arch: GdnArch) -> bytes:
    desc = json.dumps(arch.descriptor(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC_GDN)
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    theta = np.asarray(theta, dtype="<f8").reshape(-1)
    buf.write(struct.pack("<Q", theta.shape[0]))
    buf.write(theta.tobytes())
    return buf.getvalue()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC_GDN:
        raise ValidationError("not a network checkpoint (bad magic)")
    (dlen,) = struct.unpack_from("<I", raw, 5)
    desc = json.loads(raw[9 : 9 + dlen].decode("utf-8"))
    arch = GdnArch.from_descriptor(desc)
    (n,) = struct.unpack_from("<Q", raw, 9 + dlen)
    theta = np.frombuffer(raw, dtype="<f8", count=n, offset=9 + dlen + 8).copy()
    if theta.shape[0] != arch.param_count:
        raise ValidationError("checkpoint parameter length does not match architecture")
    return theta, arch


def loss_trace_csv(path, trace):
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, val in enumerate(trace):
            fh.write(f"{i},{repr(float(val))}\n")
