"""Config-driven experiment pipeline and ablation grids.

One pipeline run is: simulate paths of the bernoulli-factor experiment
process, compute projected conditional-law targets, train one geometric
network "expert" per time step with warm starts, fit the hypernetwork on
consecutive expert parameters from the training times, then evaluate the
experts and both hypernetwork modes on the held-out final times.

The experiment process is expressed in the general Volterra framework:
drift kernel is the two-step kernel with weight w on the current state; the
symmetric diffusion coefficient is the constant 2 log(varsigma * sigma);
the latent factor is a bernoulli jump lam_f * B * I whose size is chosen so
the conditional covariance atoms match the two-atom law (exactly so for
scalar sigma and constant varsigma, by log-determinant otherwise).

Everything downstream of a (config, seed) pair is deterministic; reports
carry the config hash so mismatched reloads are rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import gdn, hgn, projection, symmat, volterra
from .errors import NpvolError, ValidationError
from .rng import derive_seed, parallel_map

from . import __version__


# ---------------------------------------------------------------------------
# coefficient presets


def make_mu(preset: dict):
    kind = preset.get("kind")
    if kind == "const":
        c = float(preset["c"])
        return lambda x: np.full_like(np.asarray(x, float), c)
    if kind == "affine":
        a, b = float(preset["a"]), float(preset["b"])
        return lambda x: a + b * np.asarray(x, float)
    if kind == "expcos":
        return lambda x: np.exp(-np.asarray(x, float)) + np.cos(np.asarray(x, float) / 100.0)
    raise ValidationError(f"unknown drift preset {preset!r}")


def make_varsigma(preset: dict):
    kind = preset.get("kind")
    if kind == "const":
        c = float(preset["c"])
        if not (0.0 < c <= 2.0):
            raise ValidationError("varsigma const must lie in (0, 2]")
        return lambda x: np.full(np.asarray(x).shape[:-1], c)
    raise ValidationError(f"unknown varsigma preset {preset!r}")


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    d: int = 2
    mu: dict = field(default_factory=lambda: {"kind": "affine", "a": 0.005, "b": -0.5})
    varsigma: dict = field(default_factory=lambda: {"kind": "const", "c": 1.0})
    sigma_scale: float = 1.0
    sigma_matrix: Optional[list] = None  # explicit SPD matrix overrides sigma_scale
    lam: float = 0.1
    w: float = 0.5
    n_paths: int = 64
    horizon: int = 40
    train_split: int = 32  # first test time
    window: int = 2
    gdn_hidden: list = field(default_factory=lambda: [64, 64, 64])
    hgn_hidden: list = field(default_factory=lambda: [256, 256, 256])
    aux_dim: int = 8
    epochs_first: int = 20
    epochs_rest: int = 10
    hyper_epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    hyper_lr: float = 1e-3
    clip: float = 10.0
    seed: int = 1
    projection: str = "closed_form"
    ci_mode: str = "normal"
    train_base_points: bool = True
    init: str = "fixed"

    def __post_init__(self):
        if not (0 < self.train_split <= self.horizon):
            raise ValidationError("train_split must lie in (0, horizon]")
        if self.window < 2:
            raise ValidationError("window must be at least 2 (the targets read x_{t-1}, x_t)")
        if not (0.0 < self.w <= 1.0):
            raise ValidationError("w must lie in (0, 1]")
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        projection.ProjectionMode.parse(self.projection)
        if self.ci_mode not in ("normal", "sd"):
            raise ValidationError(f"unknown ci mode {self.ci_mode!r}")
        make_mu(self.mu)
        make_varsigma(self.varsigma)
        _ = self.sigma()

    def sigma(self) -> np.ndarray:
        if self.sigma_matrix is not None:
            mat = np.asarray(self.sigma_matrix, dtype=np.float64)
            if mat.shape != (self.d, self.d):
                raise ValidationError("sigma_matrix shape does not match d")
            if not symmat.is_spd(mat):
                raise ValidationError("sigma_matrix must be SPD")
            return mat
        if self.sigma_scale <= 0:
            raise ValidationError("sigma_scale must be positive")
        return self.sigma_scale * np.eye(self.d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def desk_base_config(seed: int = 1) -> ExperimentConfig:
    """The desk-scale base problem used by the scripts and acceptance runs.

    Small diffusion floor with a moderate bernoulli jump, standard-normal
    initial states, and enough per-expert epochs for the warm-start chain to
    actually converge at this scale (the 20/10 protocol in the plain config
    defaults is tuned for much longer horizons and bigger sample counts).
    """
    return ExperimentConfig(
        seed=seed,
        lam=0.1,
        varsigma={"kind": "const", "c": 0.01},
        init="standard_normal",
        epochs_first=60,
        epochs_rest=30,
        batch_size=64,
        hyper_epochs=200,
    )


# ---------------------------------------------------------------------------
# process construction


def experiment_process(config: ExperimentConfig) -> volterra.VolterraSpec:
    """Translate the experiment parameters into a Volterra spec.

    The bernoulli jump size in log space is matched so the conditional
    covariance atoms reproduce the two-atom law; for non-scalar sigma the
    scalar jump matches the atoms' log-determinant gap instead (the closed
    form is then an approximation of the simulated process's projection).
    """
    d = config.d
    mu = make_mu(config.mu)
    varsigma = make_varsigma(config.varsigma)
    sigma = config.sigma()
    vs_const = float(varsigma(np.zeros((1, d)))[0])

    log_vol = 2.0 * symmat.mat_log(vs_const * sigma)
    sig_vals = np.linalg.eigvalsh(vs_const * sigma)
    lam_f = float(2.0 * np.mean(np.log1p(config.lam / sig_vals)))

    bound_m = symmat.frobenius(log_vol) + 1e-9
    factor = volterra.BernoulliScaledFactor(lam_f)

    def mu_fun(t, x):
        return mu(x)

    def sigma_fun(t, x):
        return np.broadcast_to(log_vol, np.asarray(x).shape[:-1] + (d, d))

    params = projection.TwoAtomParams(
        drift_fn=mu,
        vol_scale_fn=varsigma,
        vol_matrix=sigma,
        factor_scale=config.lam,
        drift_weight=config.w,
    )
    return volterra.VolterraSpec(
        d=d,
        mu=mu_fun,
        sigma=sigma_fun,
        kernel=volterra.TwoStepKernel(config.w),
        factor=factor,
        bound_m=bound_m,
        bound_r=factor.bound(d),
        init=config.init,
        closed_form=params,
    )


# ---------------------------------------------------------------------------
# statistics


def _normal_quantile(p: float) -> float:
    """Standard normal quantile by bisection on the erf-based CDF."""
    if not (0.0 < p < 1.0):
        raise ValidationError("quantile probability must lie in (0, 1)")
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def confidence_interval(losses, level: float = 0.95, mode: str = "normal"):
    """(mean, lo, hi): normal mode uses mean +- z * sd / sqrt(n) with z = 1.96
    at the default level; sd mode reports mean +- one sample deviation."""
    losses = [float(v) for v in losses]
    if not losses:
        raise ValidationError("confidence interval of an empty list")
    n = len(losses)
    mean = sum(losses) / n
    if n == 1:
        return mean, mean, mean
    var = sum((v - mean) ** 2 for v in losses) / (n - 1)
    sd = math.sqrt(var)
    if mode == "sd":
        half = sd
    elif mode == "normal":
        z = 1.96 if level == 0.95 else _normal_quantile(0.5 * (1.0 + level))
        half = z * sd / math.sqrt(n)
    else:
        raise ValidationError(f"unknown ci mode {mode!r}")
    return mean, mean - half, mean + half


# ---------------------------------------------------------------------------
# report


@dataclass
class Report:
    """All numeric outputs of one pipeline run, JSON-native throughout."""

    config: dict
    config_hash: str
    seed: int
    test_times: List[int]
    gdn_losses: List[float]
    hgn1_losses: List[float]
    hgnr_losses: List[float]
    summary: Dict[str, dict]  # model -> {mean, ci_lo, ci_hi}
    hyper_mse: float
    provenance: str
    wall_time: float

    def payload(self) -> dict:
        """Numeric content only; excludes the wall-clock measurement."""
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "test_times": self.test_times,
            "gdn_losses": self.gdn_losses,
            "hgn1_losses": self.hgn1_losses,
            "hgnr_losses": self.hgnr_losses,
            "summary": self.summary,
            "hyper_mse": self.hyper_mse,
        }

    def payload_bytes(self) -> bytes:
        return json.dumps(self.payload(), sort_keys=True, separators=(",", ":")).encode()

    def to_dict(self) -> dict:
        data = self.payload()
        data["provenance"] = self.provenance
        data["wall_time"] = self.wall_time
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Report":
        report = cls(
            config=data["config"],
            config_hash=data["config_hash"],
            seed=data["seed"],
            test_times=list(data["test_times"]),
            gdn_losses=list(data["gdn_losses"]),
            hgn1_losses=list(data["hgn1_losses"]),
            hgnr_losses=list(data["hgnr_losses"]),
            summary=data["summary"],
            hyper_mse=data["hyper_mse"],
            provenance=data.get("provenance", ""),
            wall_time=data.get("wall_time", 0.0),
        )
        echo = ExperimentConfig.from_dict(report.config)
        if echo.hash() != report.config_hash:
            raise ValidationError("report config hash does not match its config echo")
        return report

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "Report":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineArtifacts:
    """Intermediate products kept around for checkpointing and evaluation."""

    spec: volterra.VolterraSpec
    paths: volterra.PathSet
    targets: projection.ProjectionTargets
    arch: gdn.GdnArch
    hgn_spec: hgn.HgnSpec
    theta_seq: np.ndarray  # (T+1, P); rows before the first trainable time are zero
    first_time: int
    hyper: hgn.HgnTrainResult
    datasets: Dict[int, gdn.GdnDataset]


def _per_time_datasets(config, paths, targets):
    datasets = {}
    first = max(0, config.window - 2)
    for t in range(first, config.horizon + 1):
        datasets[t] = gdn.GdnDataset(
            paths.windows(t, config.window),
            targets.means[:, t],
            targets.covs[:, t],
        )
    return datasets, first


class _Stage:
    """Context manager tagging pipeline errors with the stage they died in,
    preserving the exception class so exit-code mapping still works."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, NpvolError):
            raise type(exc)(f"[stage {self.name}] {exc}") from exc
        return False


def simulate_stage(config: ExperimentConfig):
    with _Stage("simulate"):
        spec = experiment_process(config)
        paths = volterra.simulate_paths(
            spec, config.n_paths, config.horizon, derive_seed(config.seed, "simulate")
        )
    return spec, paths


def project_stage(config: ExperimentConfig, spec, paths):
    with _Stage("project"):
        mode = projection.ProjectionMode.parse(config.projection)
        return projection.build_projection_targets(spec, paths, mode)


def train_and_evaluate(config: ExperimentConfig, spec, paths, targets, started=None):
    """Training and evaluation stages on already-built paths and targets."""
    started = time.perf_counter() if started is None else started
    master = config.seed
    datasets, first = _per_time_datasets(config, paths, targets)
    if first >= config.train_split:
        raise ValidationError("window leaves no trainable time before the split")

    arch = gdn.GdnArch.for_process(
        config.d, config.d, window=config.window, hidden=tuple(config.gdn_hidden)
    )
    arch = replace(arch, train_base_points=config.train_base_points)

    theta_seq = np.zeros((config.horizon + 1, arch.param_count))
    with _Stage("train-experts"):
        # zero readout weights + bias warm-started at the first targets'
        # center: the first expert begins at the data's central Gaussian and
        # learns residuals in log-covariance scale; later experts inherit
        # everything through the warm starts
        theta = gdn.init_params(arch, derive_seed(master, "gdn-init"), readout_scale=0.0)
        theta = gdn.set_readout_bias(
            theta, arch, gdn.target_center_coords(datasets[first])
        )
        for t in range(first, config.horizon + 1):
            epochs = config.epochs_first if t == first else config.epochs_rest
            theta, _ = gdn.train_gdn(
                datasets[t],
                arch,
                theta,
                epochs=epochs,
                batch_size=config.batch_size,
                lr=config.lr,
                seed=derive_seed(master, "gdn-train", t),
                settings=gdn.TrainSettings(clip=config.clip),
            )
            theta_seq[t] = theta

    spec_h = hgn.HgnSpec(
        arch,
        hidden=tuple(config.hgn_hidden),
        aux_dim=config.aux_dim,
        horizon=config.horizon,
    )
    with _Stage("train-hypernetwork"):
        hyper = hgn.train_hypernetwork(
            theta_seq,
            spec_h,
            epochs=config.hyper_epochs,
            lr=config.hyper_lr,
            seed=derive_seed(master, "hyper"),
            pair_times=range(first, config.train_split - 1),
            clip=config.clip,
        )

    with _Stage("evaluate"):
        test_times = list(range(config.train_split, config.horizon + 1))
        n = float(config.n_paths)
        gdn_losses = [
            gdn.imse_loss(theta_seq[t], arch, datasets[t]) / n for t in test_times
        ]
        hgn1 = hgn.evaluate_hgn(
            spec_h, hyper.vartheta, theta_seq, datasets, test_times, "one_step"
        )
        hgnr = hgn.evaluate_hgn(
            spec_h,
            hyper.vartheta,
            theta_seq,
            datasets,
            test_times,
            "recurrent",
            roll_from=config.train_split - 1,
        )
        hgn1_losses = [hgn1[t] / n for t in test_times]
        hgnr_losses = [hgnr[t] / n for t in test_times]

    summary = {}
    for name, vals in (
        ("gdn", gdn_losses),
        ("hgn_one_step", hgn1_losses),
        ("hgn_recurrent", hgnr_losses),
    ):
        mean, lo, hi = confidence_interval(vals, mode=config.ci_mode)
        summary[name] = {"mean": mean, "ci_lo": lo, "ci_hi": hi}

    report = Report(
        config=config.to_dict(),
        config_hash=config.hash(),
        seed=master,
        test_times=test_times,
        gdn_losses=gdn_losses,
        hgn1_losses=hgn1_losses,
        hgnr_losses=hgnr_losses,
        summary=summary,
        hyper_mse=hyper.final_mse,
        provenance=f"npvol-{__version__}+cfg:{config.hash()}",
        wall_time=time.perf_counter() - started,
    )
    artifacts = PipelineArtifacts(
        spec, paths, targets, arch, spec_h, theta_seq,
        max(0, config.window - 2), hyper, datasets,
    )
    return report, artifacts


def run_pipeline(config: ExperimentConfig, return_artifacts: bool = False):
    """Full experiment: simulate, project, train experts and hypernetwork,
    evaluate on the held-out final times.  Deterministic given the config."""
    started = time.perf_counter()
    spec, paths = simulate_stage(config)
    targets = project_stage(config, spec, paths)
    report, artifacts = train_and_evaluate(config, spec, paths, targets, started)
    return (report, artifacts) if return_artifacts else report


# ---------------------------------------------------------------------------
# ablation grids


ABLATION_AXES = ("mu", "lambda", "dimension", "memory", "varsigma")


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "mu":
        return replace(config, mu=dict(value))
    if axis == "lambda":
        return replace(config, lam=float(value))
    if axis == "dimension":
        if config.sigma_matrix is not None:
            raise ValidationError("dimension ablation needs sigma given as a scale")
        return replace(config, d=int(value))
    if axis == "memory":
        m = float(value)
        if not (0.0 <= m < 1.0):
            raise ValidationError("memory value must lie in [0, 1)")
        return replace(config, w=1.0 - m)
    if axis == "varsigma":
        return replace(config, varsigma={"kind": "const", "c": float(value)})
    raise ValidationError(f"unknown ablation axis {axis!r}; pick one of {ABLATION_AXES}")


@dataclass
class AblationEntry:
    axis: str
    value: object
    report: Optional[Report]
    error: Optional[str] = None


def ablate(config: ExperimentConfig, axis: str, values) -> List[AblationEntry]:
    """One pipeline per value with per-variation derived seeds; failures stay
    confined to their own entry."""
    values = list(values)
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; pick one of {ABLATION_AXES}")

    def run_one(item):
        index, value = item
        try:
            varied = _apply_axis(config, axis, value)
            varied = replace(varied, seed=derive_seed(config.seed, "variation", axis, index))
            return AblationEntry(axis, value, run_pipeline(varied))
        except NpvolError as e:
            return AblationEntry(axis, value, None, error=str(e))

    return parallel_map(run_one, enumerate(values))


# ---------------------------------------------------------------------------
# emission


def _fmt(value: float) -> str:
    return repr(float(value))


def emit_report(report: Report, out_dir, formats=("csv", "json"), stem: str = "report"):
    """Write the per-time CSV, summary CSV, and/or the JSON echo; returns paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        per_time = os.path.join(out_dir, f"{stem}_per_time.csv")
        with open(per_time, "w") as fh:
            fh.write("t,gdn_loss,hgn1_loss,hgnR_loss\n")
            for i, t in enumerate(report.test_times):
                fh.write(
                    f"{t},{_fmt(report.gdn_losses[i])},"
                    f"{_fmt(report.hgn1_losses[i])},{_fmt(report.hgnr_losses[i])}\n"
                )
        written.append(per_time)
        summary = os.path.join(out_dir, f"{stem}_summary.csv")
        label = report.config_hash
        with open(summary, "w") as fh:
            fh.write("axis_value,model,mean,ci_lo,ci_hi\n")
            for model, stats in report.summary.items():
                fh.write(
                    f"{label},{model},{_fmt(stats['mean'])},"
                    f"{_fmt(stats['ci_lo'])},{_fmt(stats['ci_hi'])}\n"
                )
        written.append(summary)
    if "json" in formats:
        path = os.path.join(out_dir, f"{stem}.json")
        report.save(path)
        written.append(path)
    return written


def emit_comparison(entries: List[AblationEntry], out_dir, stem: str = "ablation"):
    """Grid summary CSV: one row per (variation, model); failures noted."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{stem}_summary.csv")
    with open(path, "w") as fh:
        fh.write("axis_value,model,mean,ci_lo,ci_hi\n")
        for entry in entries:
            label = json.dumps(entry.value) if isinstance(entry.value, dict) else str(entry.value)
            if entry.report is None:
                fh.write(f"{label},failed:{entry.error},,,\n")
                continue
            for model, stats in entry.report.summary.items():
                fh.write(
                    f"{label},{model},{_fmt(stats['mean'])},"
                    f"{_fmt(stats['ci_lo'])},{_fmt(stats['ci_hi'])}\n"
                )
    return path
