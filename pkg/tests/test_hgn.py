import numpy as np
import pytest

from helpers import random_point
from npvol import gdn, hgn, nets
from npvol.errors import ValidationError
from npvol.hgn import (
    HgnSpec,
    evaluate_hgn,
    fit_affine_hypernetwork_lstsq,
    hgn_rollout,
    hyper_forward,
    hyper_mse,
    init_hyper,
    train_hypernetwork,
)


def small_arch():
    return gdn.GdnArch.for_process(state_dim=2, out_dim=2, window=2, hidden=(8,))


def small_spec(hidden=(32,), horizon=10):
    return HgnSpec(small_arch(), hidden=hidden, aux_dim=8, horizon=horizon)


def affine_spec(horizon=10):
    return HgnSpec(small_arch(), hidden=(), aux_dim=8, horizon=horizon)


def random_theta_seq(spec, gen, times):
    return np.stack(
        [gdn.init_params(spec.gdn_arch, seed=i) + 0.01 * gen.normal(size=spec.param_dim)
         for i in range(times)]
    )


def random_datasets(spec, gen, times, n=4):
    out = {}
    for t in range(times):
        out[t] = gdn.GdnDataset.from_pairs(
            [(gen.normal(size=(2, 2)), random_point(2, gen)) for _ in range(n)]
        )
    return out


class TestSpec:
    def test_latent_layout(self):
        spec = small_spec()
        assert spec.latent_dim == spec.param_dim + 8
        z = spec.latent(np.arange(spec.param_dim, dtype=float), 5)
        assert np.array_equal(spec.readout(z), np.arange(spec.param_dim, dtype=float))
        assert np.allclose(z[spec.param_dim :], 0.5)

    def test_latent_dim_validation(self):
        arch = small_arch()
        with pytest.raises(ValidationError):
            HgnSpec(arch, hidden=(8,), aux_dim=0, horizon=5)

    def test_latent_dim_floor_of_twelve(self):
        tiny = gdn.GdnArch(state_dim=1, window=1, out_dim=1, widths=(1, 2))
        with pytest.raises(ValidationError):
            HgnSpec(tiny, hidden=(4,), aux_dim=1, horizon=5)

    def test_hyper_forward_dim_check(self):
        spec = small_spec()
        vt = init_hyper(spec, seed=0)
        with pytest.raises(Exception):
            hyper_forward(vt, spec, np.zeros(spec.latent_dim + 1))

    def test_descriptor_roundtrip(self):
        spec = small_spec()
        back = HgnSpec.from_descriptor(spec.descriptor())
        assert back == spec


class TestHyperForward:
    def test_zero_params_zero_output(self):
        spec = small_spec()
        vt = np.zeros(spec.hyper_param_count)
        z = np.random.default_rng(0).normal(size=spec.latent_dim)
        assert np.array_equal(hyper_forward(vt, spec, z), np.zeros(spec.latent_dim))

    def test_identity_affine_layer(self):
        spec = affine_spec()
        vt = nets.pack_mlp([(np.eye(spec.latent_dim), np.zeros(spec.latent_dim))])
        z = np.random.default_rng(1).normal(size=spec.latent_dim)
        assert np.allclose(hyper_forward(vt, spec, z), z, atol=1e-15)

    def test_referential_transparency(self):
        spec = small_spec()
        vt = init_hyper(spec, seed=0)
        z = np.random.default_rng(2).normal(size=spec.latent_dim)
        once = hyper_forward(vt, spec, hyper_forward(vt, spec, z))
        again = hyper_forward(vt, spec, hyper_forward(vt, spec, z))
        assert np.array_equal(once, again)


class TestHyperMse:
    def test_matches_brute_force(self):
        spec = small_spec()
        gen = np.random.default_rng(3)
        seq = random_theta_seq(spec, gen, 6)
        vt = init_hyper(spec, seed=1)
        brute = 0.0
        for t in range(5):
            pred = hyper_forward(vt, spec, spec.latent(seq[t], t))
            brute += float(np.sum((pred - spec.latent(seq[t + 1], t + 1)) ** 2))
        assert hyper_mse(vt, spec, seq) == pytest.approx(brute, rel=1e-12)


class TestTraining:
    def test_zero_epochs_unchanged(self):
        spec = small_spec()
        gen = np.random.default_rng(4)
        seq = random_theta_seq(spec, gen, 5)
        vt0 = init_hyper(spec, seed=2)
        res = train_hypernetwork(seq, spec, epochs=0, lr=1e-3, seed=0, vartheta0=vt0)
        assert np.array_equal(res.vartheta, vt0)

    def test_seed_determinism(self):
        spec = small_spec()
        gen = np.random.default_rng(5)
        seq = random_theta_seq(spec, gen, 5)
        a = train_hypernetwork(seq, spec, epochs=10, lr=1e-3, seed=7)
        b = train_hypernetwork(seq, spec, epochs=10, lr=1e-3, seed=7)
        assert np.array_equal(a.vartheta, b.vartheta)
        assert a.trace == b.trace

    def test_adam_improves(self):
        spec = small_spec()
        gen = np.random.default_rng(6)
        seq = random_theta_seq(spec, gen, 5)
        vt0 = init_hyper(spec, seed=3)
        res = train_hypernetwork(seq, spec, epochs=60, lr=1e-2, seed=0, vartheta0=vt0)
        assert res.final_mse < hyper_mse(vt0, spec, seq)

    def test_constant_sequence_lstsq_exact(self):
        spec = affine_spec()
        theta_bar = gdn.init_params(spec.gdn_arch, seed=4)
        seq = np.tile(theta_bar, (8, 1))
        vt = fit_affine_hypernetwork_lstsq(seq, spec)
        assert hyper_mse(vt, spec, seq) < 1e-6

    def test_lstsq_requires_affine(self):
        spec = small_spec()
        with pytest.raises(ValidationError):
            fit_affine_hypernetwork_lstsq(np.zeros((4, spec.param_dim)), spec)


class TestRolloutAndEval:
    def test_zero_readout_gives_anchor(self):
        spec = small_spec(horizon=6)
        vt = np.zeros(spec.hyper_param_count)
        states = np.random.default_rng(7).normal(size=(8, 2))
        z0 = spec.latent(np.zeros(spec.param_dim), 0)
        points, _ = hgn_rollout(spec, vt, states, range(1, 4), z_start=z0, t_start=0)
        for p in points:
            assert np.allclose(p.mean, 0.0)
            assert np.allclose(p.cov, np.eye(2))

    def test_one_step_plumbing_identity(self):
        # an exactly fitted affine hypernetwork reproduces theta_1 from
        # theta_0, so the rollout equals the expert forward pass
        spec = affine_spec(horizon=4)
        gen = np.random.default_rng(8)
        seq = random_theta_seq(spec, gen, 5)
        vt = fit_affine_hypernetwork_lstsq(seq, spec)
        states = gen.normal(size=(6, 2))
        z0 = spec.latent(seq[0], 0)
        points, _ = hgn_rollout(spec, vt, states, [1], z_start=z0, t_start=0)
        window = states[1:3]
        expected = gdn.gdn_forward(seq[1], spec.gdn_arch, window)
        assert np.allclose(points[0].mean, expected.mean, atol=1e-7)
        assert np.allclose(points[0].cov, expected.cov, atol=1e-7)

    def test_causality(self):
        spec = small_spec(horizon=8)
        gen = np.random.default_rng(9)
        vt = init_hyper(spec, seed=5)
        states = gen.normal(size=(10, 2))
        z0 = spec.latent(gdn.init_params(spec.gdn_arch, seed=6), 0)
        pts, _ = hgn_rollout(spec, vt, states, range(1, 5), z_start=z0, t_start=0)
        future = states.copy()
        future[7:] += 100.0  # only times > 5 change
        pts2, _ = hgn_rollout(spec, vt, future, range(1, 5), z_start=z0, t_start=0)
        for a, b in zip(pts, pts2):
            assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)

    def test_latent_state_sufficiency(self):
        spec = small_spec(horizon=8)
        gen = np.random.default_rng(10)
        vt = init_hyper(spec, seed=7)
        states = gen.normal(size=(10, 2))
        z0 = spec.latent(gdn.init_params(spec.gdn_arch, seed=8), 0)
        pts, latents = hgn_rollout(spec, vt, states, range(1, 7), z_start=z0, t_start=0)
        mid = 4
        pts2, _ = hgn_rollout(
            spec, vt, states, range(mid, 7), z_start=latents[mid], t_start=mid
        )
        offset = mid - 1
        for k, t in enumerate(range(mid, 7)):
            assert np.array_equal(pts[offset + k].mean, pts2[k].mean)
            assert np.array_equal(pts[offset + k].cov, pts2[k].cov)

    def test_perfect_hypernetwork_matches_experts(self):
        spec = affine_spec(horizon=8)
        gen = np.random.default_rng(11)
        theta_bar = gdn.init_params(spec.gdn_arch, seed=9)
        seq = np.tile(theta_bar, (9, 1))
        vt = fit_affine_hypernetwork_lstsq(seq, spec)
        datasets = random_datasets(spec, gen, 9)
        ts = range(4, 8)
        one = evaluate_hgn(spec, vt, seq, datasets, ts, "one_step")
        rec = evaluate_hgn(spec, vt, seq, datasets, ts, "recurrent", roll_from=3)
        for t in ts:
            expert = gdn.imse_loss(seq[t], spec.gdn_arch, datasets[t])
            assert one[t] == pytest.approx(expert, abs=1e-10)
            assert rec[t] == pytest.approx(expert, abs=1e-10)

    def test_losses_finite_both_modes(self):
        spec = small_spec(horizon=8)
        gen = np.random.default_rng(12)
        seq = random_theta_seq(spec, gen, 9)
        vt = train_hypernetwork(seq, spec, epochs=5, lr=1e-3, seed=1).vartheta
        datasets = random_datasets(spec, gen, 9)
        one = evaluate_hgn(spec, vt, seq, datasets, range(4, 8), "one_step")
        rec = evaluate_hgn(spec, vt, seq, datasets, range(4, 8), "recurrent", roll_from=3)
        assert all(np.isfinite(v) for v in one.values())
        assert all(np.isfinite(v) for v in rec.values())

    def test_unknown_mode(self):
        spec = small_spec()
        with pytest.raises(ValidationError):
            evaluate_hgn(spec, np.zeros(spec.hyper_param_count), np.zeros((3, spec.param_dim)),
                         {}, [1], "both")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        spec = small_spec()
        vt = init_hyper(spec, seed=10)
        z0 = spec.latent(gdn.init_params(spec.gdn_arch, seed=11), 0)
        f = tmp_path / "hyper.nphg"
        hgn.save_checkpoint(f, vt, z0, spec)
        vt2, z02, spec2 = hgn.load_checkpoint(f)
        assert np.array_equal(vt2, vt)
        assert np.array_equal(z02, z0)
        assert spec2 == spec

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "bad.nphg"
        f.write_bytes(b"WRONG" + b"\x00" * 16)
        with pytest.raises(ValidationError):
            hgn.load_checkpoint(f)
