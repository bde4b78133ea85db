"""Hypernetwork over geometric-network parameters.

A latent state z_t = (theta_t, time embedding) evolves through a ReLU MLP
h: z_{t-1} -> z_t; a fixed linear readout takes the first P coordinates,
which are the parameters of the geometric network used to predict at time
t.  The hypernetwork is trained on consecutive latent pairs from a sequence
of per-time expert parameters with a plain Euclidean least-squares loss, so
no backpropagation through time is ever needed.

Evaluation modes:
  * one_step:  z_{t-1} is rebuilt from the stored true expert parameters,
    so the hypernetwork only ever predicts one step ahead.
  * recurrent: the latent state is rolled forward from the last training
    time using the hypernetwork's own outputs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import gdn, nets
from .errors import DimensionError, TrainingError, ValidationError
from .rng import stream

MAGIC_HGN = b"NPHG1"


@dataclass
class HgnSpec:
    """Latent layout and hypernetwork shape around a given GDN architecture.

    Latent dimension is P + aux_dim where P is the GDN parameter count; the
    auxiliary block carries the time step as a normalized scalar repeated
    aux_dim times, and the readout is projection onto the first P entries.
    """

    gdn_arch: gdn.GdnArch
    hidden: Tuple[int, ...] = (256, 256, 256)
    aux_dim: int = 8
    horizon: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if self.aux_dim < 1:
            raise ValidationError("aux_dim must be >= 1")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.latent_dim < max(12, self.param_dim + 1):
            raise ValidationError(
                f"latent dim {self.latent_dim} below required "
                f"max(12, P+1) = {max(12, self.param_dim + 1)}"
            )

    @property
    def param_dim(self) -> int:
        return self.gdn_arch.param_count

    @property
    def latent_dim(self) -> int:
        return self.param_dim + self.aux_dim

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.latent_dim, *self.hidden, self.latent_dim)

    @property
    def hyper_param_count(self) -> int:
        return nets.mlp_param_count(self.widths)

    def embed_time(self, t: int) -> np.ndarray:
        return np.full(self.aux_dim, t / float(self.horizon))

    def latent(self, theta: np.ndarray, t: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.shape[0] != self.param_dim:
            raise DimensionError("theta length does not match the GDN architecture")
        return np.concatenate([theta, self.embed_time(t)])

    def readout(self, z: np.ndarray) -> np.ndarray:
        """Projection onto the first P coordinates."""
        z = np.asarray(z, dtype=np.float64)
        return z[..., : self.param_dim]

    def descriptor(self) -> dict:
        return {
            "gdn_arch": self.gdn_arch.descriptor(),
            "hidden": list(self.hidden),
            "aux_dim": self.aux_dim,
            "horizon": self.horizon,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "HgnSpec":
        return cls(
            gdn.GdnArch.from_descriptor(desc["gdn_arch"]),
            tuple(desc["hidden"]),
            desc["aux_dim"],
            desc["horizon"],
        )


def hyper_forward(vartheta: np.ndarray, spec: HgnSpec, z: np.ndarray) -> np.ndarray:
    """Apply the hypernetwork to one latent state or a batch of them."""
    layers = nets.unpack_mlp(np.asarray(vartheta, float), spec.widths)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.latent_dim:
        raise DimensionError(
            f"latent state has dim {z.shape[-1]}, expected {spec.latent_dim}"
        )
    single = z.ndim == 1
    out = nets.mlp_forward(layers, np.atleast_2d(z))
    return out[0] if single else out


def init_hyper(spec: HgnSpec, seed: int, center: Optional[np.ndarray] = None) -> np.ndarray:
    """Xavier hidden layers; when a center is given, the final layer starts
    as the constant map onto it (zero weights, bias = center), so training
    only has to learn the drift around the parameter trajectory's bulk."""
    vartheta = nets.init_mlp(spec.widths, seed)
    if center is not None:
        layers = nets.unpack_mlp(vartheta, spec.widths)
        layers[-1][0][...] = 0.0
        layers[-1][1][...] = np.asarray(center, dtype=np.float64)
    return vartheta


def hyper_mse(vartheta: np.ndarray, spec: HgnSpec, theta_seq: np.ndarray, pair_times=None) -> float:
    """Sum over consecutive pairs of squared latent prediction errors."""
    zs, zn = _latent_pairs(spec, theta_seq, pair_times)
    pred = hyper_forward(vartheta, spec, zs)
    return float(np.sum((pred - zn) ** 2))


def _latent_pairs(spec: HgnSpec, theta_seq: np.ndarray, pair_times=None):
    theta_seq = np.asarray(theta_seq, dtype=np.float64)
    if theta_seq.ndim != 2 or theta_seq.shape[1] != spec.param_dim:
        raise DimensionError("theta_seq must have shape (times, P)")
    if pair_times is None:
        pair_times = range(theta_seq.shape[0] - 1)
    pair_times = [int(t) for t in pair_times]
    if not pair_times:
        raise ValidationError("need at least one consecutive parameter pair")
    if max(pair_times) + 1 >= theta_seq.shape[0]:
        raise ValidationError("pair time beyond the end of theta_seq")
    zs = np.stack([spec.latent(theta_seq[t], t) for t in pair_times])
    zn = np.stack([spec.latent(theta_seq[t + 1], t + 1) for t in pair_times])
    return zs, zn


@dataclass
class HgnTrainResult:
    vartheta: np.ndarray
    z0: np.ndarray
    final_mse: float
    trace: List[float] = field(default_factory=list)


def train_hypernetwork(
    theta_seq: np.ndarray,
    spec: HgnSpec,
    epochs: int,
    lr: float,
    seed: int,
    pair_times=None,
    vartheta0: Optional[np.ndarray] = None,
    clip: float = 10.0,
) -> HgnTrainResult:
    """Fit the hypernetwork on consecutive latent pairs by full-batch ADAM.

    Returns the parameters with the lowest pair MSE seen at an epoch
    boundary (including the initial ones), the initial latent state, and the
    loss trace.
    """
    zs, zn = _latent_pairs(spec, theta_seq, pair_times)
    if vartheta0 is None:
        vartheta = init_hyper(spec, seed, center=zn.mean(axis=0))
    else:
        vartheta = np.array(vartheta0, float, copy=True)
    if vartheta.shape != (spec.hyper_param_count,):
        raise DimensionError("vartheta0 length does not match the hypernetwork shape")

    best = vartheta.copy()
    best_mse = np.inf
    state = gdn.AdamState.fresh(spec.hyper_param_count)
    trace: List[float] = []
    # one forward+backward per epoch: the loss is recorded at the parameters
    # entering the epoch, and the best parameters ever evaluated are returned
    for epoch in range(epochs + 1):
        layers = nets.unpack_mlp(vartheta, spec.widths)
        pred, cache = nets.mlp_forward(layers, zs, want_cache=True)
        resid = pred - zn
        loss = float(np.sum(resid * resid))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite hypernetwork loss at epoch {epoch}")
        if loss < best_mse:
            best_mse = loss
            best = vartheta.copy()
        if epoch == epochs:
            break
        trace.append(loss)
        grad, _ = nets.mlp_backward(layers, cache, 2.0 * resid)
        try:
            gdn.adam_step_inplace(state, vartheta, grad, lr=lr, clip=clip)
        except Exception as e:
            raise TrainingError(f"hypernetwork training failed at epoch {epoch}: {e}") from e

    z0 = spec.latent(theta_seq[0], 0)
    return HgnTrainResult(best, z0, best_mse, trace)


def fit_affine_hypernetwork_lstsq(theta_seq: np.ndarray, spec: HgnSpec, pair_times=None):
    """Exact least-squares fit when the hypernetwork is a single affine layer.

    With fewer pairs than latent dimensions the system is interpolated
    exactly (minimum-norm solution); useful as a perfect-fit reference.
    """
    if len(spec.widths) != 2:
        raise ValidationError("least-squares fit applies to a single affine layer")
    zs, zn = _latent_pairs(spec, theta_seq, pair_times)
    design = np.concatenate([zs, np.ones((zs.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(design, zn, rcond=None)
    a = sol[:-1].T
    b = sol[-1]
    return nets.pack_mlp([(a, b)])


# ---------------------------------------------------------------------------
# rollout and evaluation


def hgn_rollout(
    spec: HgnSpec,
    vartheta: np.ndarray,
    states: np.ndarray,
    t_range,
    z_start: Optional[np.ndarray] = None,
    t_start: int = 0,
):
    """Run the recurrence along one path and decode predictions.

    states holds x_{-1}..x_T as rows (so index t+1 is x_t); t_range is the
    set of times to decode.  The latent starts at z_start (time t_start) and
    advances by one hypernetwork application per time step.  Returns the
    predicted Gaussian per requested time and the latent trajectory.
    """
    states = np.asarray(states, dtype=np.float64)
    ts = sorted(int(t) for t in t_range)
    if not ts:
        return [], {}
    if z_start is None:
        raise ValidationError("rollout needs a starting latent state")
    z = np.asarray(z_start, dtype=np.float64).copy()
    arch = spec.gdn_arch
    t_cur = t_start
    points = []
    latents: Dict[int, np.ndarray] = {t_start: z.copy()}
    for t in ts:
        if t < t_cur:
            raise ValidationError("t_range must not precede the starting time")
        while t_cur < t:
            z = hyper_forward(vartheta, spec, z)
            t_cur += 1
            latents[t_cur] = z.copy()
        theta = spec.readout(z)
        a = t + 1
        if a - arch.window + 1 < 0 or a + 1 > states.shape[0]:
            raise ValidationError(f"state sequence does not cover the window at t={t}")
        window = states[a - arch.window + 1 : a + 1]
        points.append(gdn.gdn_forward(theta, arch, window))
    return points, latents


def evaluate_hgn(
    spec: HgnSpec,
    vartheta: np.ndarray,
    theta_seq: np.ndarray,
    datasets: Dict[int, gdn.GdnDataset],
    t_range,
    mode: str,
    roll_from: Optional[int] = None,
) -> Dict[int, float]:
    """Per-time intrinsic MSE of hypernetwork-generated parameters.

    mode 'one_step' rebuilds the latent from the stored true parameters at
    t-1; mode 'recurrent' rolls the latent forward from time roll_from
    (whose true parameters seed the state) through the whole range.
    """
    if mode not in ("one_step", "recurrent"):
        raise ValidationError(f"unknown evaluation mode {mode!r}")
    theta_seq = np.asarray(theta_seq, dtype=np.float64)
    ts = sorted(int(t) for t in t_range)
    losses: Dict[int, float] = {}
    if mode == "one_step":
        for t in ts:
            if t - 1 < 0:
                raise ValidationError("one_step evaluation needs t >= 1")
            z_prev = spec.latent(theta_seq[t - 1], t - 1)
            theta_hat = spec.readout(hyper_forward(vartheta, spec, z_prev))
            losses[t] = gdn.imse_loss(theta_hat, spec.gdn_arch, datasets[t])
        return losses

    t0 = ts[0] - 1 if roll_from is None else int(roll_from)
    if t0 < 0:
        raise ValidationError("recurrent evaluation needs a nonnegative start time")
    z = spec.latent(theta_seq[t0], t0)
    t_cur = t0
    for t in ts:
        while t_cur < t:
            z = hyper_forward(vartheta, spec, z)
            t_cur += 1
        theta_hat = spec.readout(z)
        losses[t] = gdn.imse_loss(theta_hat, spec.gdn_arch, datasets[t])
    return losses


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, vartheta: np.ndarray, z0: np.ndarray, spec: HgnSpec):
    desc = json.dumps(spec.descriptor(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC_HGN)
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    vt = np.asarray(vartheta, dtype="<f8").reshape(-1)
    z = np.asarray(z0, dtype="<f8").reshape(-1)
    buf.write(struct.pack("<QQ", vt.shape[0], z.shape[0]))
    buf.write(vt.tobytes())
    buf.write(z.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC_HGN:
        raise ValidationError("not a hypernetwork checkpoint (bad magic)")
    (dlen,) = struct.unpack_from("<I", raw, 5)
    spec = HgnSpec.from_descriptor(json.loads(raw[9 : 9 + dlen].decode("utf-8")))
    nv, nz = struct.unpack_from("<QQ", raw, 9 + dlen)
    off = 9 + dlen + 16
    vartheta = np.frombuffer(raw, dtype="<f8", count=nv, offset=off).copy()
    z0 = np.frombuffer(raw, dtype="<f8", count=nz, offset=off + nv * 8).copy()
    if vartheta.shape[0] != spec.hyper_param_count or z0.shape[0] != spec.latent_dim:
        raise ValidationError("checkpoint sizes do not match the spec")
    return vartheta, z0, spec
