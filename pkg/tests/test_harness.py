import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from npvol import cli, gdn, harness, projection
from npvol.errors import ValidationError
from npvol.harness import (
    ExperimentConfig,
    Report,
    ablate,
    confidence_interval,
    desk_base_config,
    emit_report,
    experiment_process,
    run_pipeline,
)


def tiny_config(**kw):
    defaults = dict(
        horizon=10,
        train_split=7,
        n_paths=12,
        gdn_hidden=[8, 8],
        hgn_hidden=[32],
        hyper_epochs=10,
        epochs_first=5,
        epochs_rest=3,
        seed=3,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(train_split=0)
        with pytest.raises(ValidationError):
            ExperimentConfig(train_split=50, horizon=40)
        with pytest.raises(ValidationError):
            ExperimentConfig(w=0.0)
        with pytest.raises(ValidationError):
            ExperimentConfig(lam=-0.1)
        with pytest.raises(ValidationError):
            ExperimentConfig(varsigma={"kind": "const", "c": 3.0})
        with pytest.raises(ValidationError):
            ExperimentConfig(projection="nonsense")

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.from_dict({"no_such_field": 1})

    def test_hash_stable_and_sensitive(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        assert a.hash() == b.hash()
        assert a.hash() != replace(a, lam=0.9).hash()

    def test_load_config(self, tmp_path):
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps(tiny_config().to_dict()))
        assert harness.load_config(f) == tiny_config()

    def test_mu_presets(self):
        x = np.array([[0.5, -1.0]])
        assert np.allclose(harness.make_mu({"kind": "const", "c": 0.3})(x), 0.3)
        assert np.allclose(
            harness.make_mu({"kind": "affine", "a": 1.0, "b": 2.0})(x), 1.0 + 2.0 * x
        )
        expcos = harness.make_mu({"kind": "expcos"})(x)
        assert np.allclose(expcos, np.exp(-x) + np.cos(x / 100.0))


class TestProcessTranslation:
    def test_closed_form_attached(self):
        spec = experiment_process(ExperimentConfig())
        assert isinstance(spec.closed_form, projection.TwoAtomParams)
        assert isinstance(spec.kernel, __import__("npvol.volterra", fromlist=["TwoStepKernel"]).TwoStepKernel)

    def test_factor_jump_matches_scalar_sigma(self):
        cfg = ExperimentConfig(lam=0.5, varsigma={"kind": "const", "c": 0.8}, sigma_scale=1.5)
        spec = experiment_process(cfg)
        expected = 2.0 * math.log1p(0.5 / (0.8 * 1.5))
        assert spec.factor.lam == pytest.approx(expected, rel=1e-12)

    def test_conditional_law_matches_two_atom_states(self):
        # with a markovian kernel and scalar sigma the simulated process's
        # conditional covariances are exactly the two-atom law's states
        cfg = ExperimentConfig(lam=0.4, w=1.0, varsigma={"kind": "const", "c": 0.7})
        spec = experiment_process(cfg)
        gen = np.random.default_rng(0)
        path = gen.normal(size=(5, 2))
        for b, expected_scale in ((0.0, 0.7 ** 2), (1.0, (0.7 + 0.4) ** 2)):
            s_path = np.zeros((5, 2, 2))
            s_path[-1] = b * spec.factor.lam * np.eye(2)
            law = projection.next_state_law(spec, 4, path, s_path)
            assert np.allclose(law.cov, expected_scale * np.eye(2), atol=1e-12)


class TestConfidenceInterval:
    def test_constant_list(self):
        assert confidence_interval([2.0, 2.0, 2.0]) == (2.0, 2.0, 2.0)

    def test_hand_case(self):
        mean, lo, hi = confidence_interval([0.0, 2.0])
        assert mean == pytest.approx(1.0)
        assert lo == pytest.approx(-0.96, abs=1e-12)
        assert hi == pytest.approx(2.96, abs=1e-12)

    def test_sd_mode(self):
        mean, lo, hi = confidence_interval([0.0, 2.0], mode="sd")
        assert hi - mean == pytest.approx(math.sqrt(2.0))

    def test_width_shrinks_like_sqrt_n(self):
        gen = np.random.default_rng(1)
        base = gen.normal(size=400)
        _, lo1, hi1 = confidence_interval(base[:100])
        _, lo2, hi2 = confidence_interval(base)
        ratio = (hi1 - lo1) / (hi2 - lo2)
        assert 1.5 < ratio < 2.7  # expect about 2 = sqrt(400/100)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            confidence_interval([])

    def test_other_level(self):
        mean, lo, hi = confidence_interval([0.0, 2.0], level=0.99)
        z99 = 2.5758293
        assert hi - mean == pytest.approx(z99, abs=1e-4)


class TestPipeline:
    def test_smoke_and_determinism(self):
        cfg = tiny_config()
        a = run_pipeline(cfg)
        b = run_pipeline(cfg)
        assert a.payload_bytes() == b.payload_bytes()
        for vals in (a.gdn_losses, a.hgn1_losses, a.hgnr_losses):
            assert all(np.isfinite(v) for v in vals)
        assert a.test_times == list(range(7, 11))

    def test_report_roundtrip(self, tmp_path):
        rep = run_pipeline(tiny_config())
        f = tmp_path / "report.json"
        rep.save(f)
        back = Report.load(f)
        assert back == rep

    def test_tampered_report_rejected(self, tmp_path):
        rep = run_pipeline(tiny_config())
        data = rep.to_dict()
        data["config"]["lam"] = 0.77
        f = tmp_path / "bad.json"
        f.write_text(json.dumps(data))
        with pytest.raises(ValidationError):
            Report.load(f)

    def test_summary_brackets_mean(self):
        rep = run_pipeline(tiny_config())
        for stats in rep.summary.values():
            assert stats["ci_lo"] <= stats["mean"] <= stats["ci_hi"]

    def test_threaded_matches_serial(self, monkeypatch):
        cfg = tiny_config()
        serial = run_pipeline(cfg).payload_bytes()
        monkeypatch.setenv("NPV_THREADS", "2")
        threaded = run_pipeline(cfg).payload_bytes()
        assert serial == threaded

    def test_higher_dimension_smoke(self):
        rep = run_pipeline(tiny_config(d=5, n_paths=8))
        assert all(np.isfinite(v) for v in rep.gdn_losses)

    def test_monte_carlo_projection_mode(self):
        rep = run_pipeline(tiny_config(projection="mc:32", n_paths=8, horizon=8, train_split=6))
        assert all(np.isfinite(v) for v in rep.gdn_losses)
        rep2 = run_pipeline(tiny_config(projection="mc:32", n_paths=8, horizon=8, train_split=6))
        assert rep.payload_bytes() == rep2.payload_bytes()


class TestAblate:
    def test_single_value_equals_pipeline(self):
        cfg = tiny_config()
        entries = ablate(cfg, "lambda", [0.3])
        assert entries[0].report is not None
        varied = replace(
            cfg, lam=0.3, seed=__import__("npvol.rng", fromlist=["derive_seed"]).derive_seed(
                cfg.seed, "variation", "lambda", 0
            )
        )
        direct = run_pipeline(varied)
        assert entries[0].report.payload_bytes() == direct.payload_bytes()

    def test_failure_isolation(self):
        cfg = tiny_config()
        entries = ablate(cfg, "varsigma", [0.5, 99.0])
        assert entries[0].report is not None
        assert entries[1].report is None
        assert entries[1].error

    def test_memory_axis_maps_to_weight(self):
        cfg = tiny_config()
        varied = harness._apply_axis(cfg, "memory", 0.25)
        assert varied.w == pytest.approx(0.75)
        with pytest.raises(ValidationError):
            harness._apply_axis(cfg, "memory", 1.0)

    def test_unknown_axis(self):
        with pytest.raises(ValidationError):
            ablate(tiny_config(), "nonsense", [1])

    def test_memory_axis_smoke(self):
        entries = ablate(tiny_config(), "memory", [0.0, 0.5])
        for entry in entries:
            assert entry.report is not None
            for vals in (entry.report.gdn_losses, entry.report.hgnr_losses):
                assert all(np.isfinite(v) for v in vals)

    def test_dimension_axis(self):
        varied = harness._apply_axis(tiny_config(), "dimension", 3)
        assert varied.d == 3
        spec = experiment_process(varied)
        assert spec.d == 3


class TestEmission:
    def test_csv_shapes(self, tmp_path):
        rep = run_pipeline(tiny_config())
        files = emit_report(rep, tmp_path)
        per_time = [f for f in files if f.endswith("per_time.csv")][0]
        lines = open(per_time).read().strip().split("\n")
        assert lines[0] == "t,gdn_loss,hgn1_loss,hgnR_loss"
        assert len(lines) == 1 + len(rep.test_times)

    def test_empty_test_range_header_only(self, tmp_path):
        cfg = tiny_config()
        rep = run_pipeline(cfg)
        empty = Report(
            config=rep.config, config_hash=rep.config_hash, seed=rep.seed,
            test_times=[], gdn_losses=[], hgn1_losses=[], hgnr_losses=[],
            summary=rep.summary, hyper_mse=rep.hyper_mse,
            provenance=rep.provenance, wall_time=0.0,
        )
        files = emit_report(empty, tmp_path, stem="empty")
        per_time = [f for f in files if f.endswith("per_time.csv")][0]
        assert open(per_time).read() == "t,gdn_loss,hgn1_loss,hgnR_loss\n"

    def test_comparison_csv(self, tmp_path):
        entries = ablate(tiny_config(), "lambda", [0.0, 99.0])
        path = harness.emit_comparison(entries, tmp_path)
        text = open(path).read()
        assert "gdn" in text and "failed:" not in text.split("\n")[1]

    def test_desk_base_config_valid(self):
        cfg = desk_base_config(seed=5)
        assert cfg.seed == 5
        experiment_process(cfg)


class TestCli:
    def test_simulate_and_exit_codes(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps(tiny_config().to_dict()))
        out = tmp_path / "out"
        rc = cli.main(["simulate", "--config", str(cfg_file), "--out-dir", str(out)])
        assert rc == 0
        assert (out / "paths.npvs").exists()
        assert (out / "paths.csv").exists()

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train_split": 0}))
        rc = cli.main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path / "o")])
        assert rc == 2

    def test_mode_flag_roundtrip(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps(tiny_config(horizon=6, train_split=4).to_dict()))
        out = tmp_path / "out"
        rc = cli.main([
            "project", "--config", str(cfg_file), "--out-dir", str(out), "--mode", "mc:16",
        ])
        assert rc == 0
        targets = projection.ProjectionTargets.load(out / "targets.nppt")
        assert targets.mode_label == "mc:16"

    def test_report_requires_file(self, tmp_path):
        rc = cli.main(["report", "--out-dir", str(tmp_path)])
        assert rc == 2

    def test_cross_invocation_determinism(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps(tiny_config(horizon=8, train_split=6).to_dict()))
        payloads = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = cli.main(["train", "--config", str(cfg_file), "--out-dir", str(out)])
            assert rc == 0
            payloads.append(harness.Report.load(out / "report.json").payload_bytes())
        assert payloads[0] == payloads[1]

    def test_train_flushes_partial_artifacts_on_failure(self, tmp_path):
        # window 3 leaves no trainable time before split 1: training aborts,
        # but the earlier stages' artifacts must already be on disk
        cfg = tiny_config(window=3, train_split=1, horizon=6)
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps(cfg.to_dict()))
        out = tmp_path / "out"
        rc = cli.main(["train", "--config", str(cfg_file), "--out-dir", str(out)])
        assert rc == 2
        assert (out / "paths.npvs").exists()
        assert (out / "targets.nppt").exists()
        assert not (out / "report.json").exists()


class TestStageLabels:
    def test_stage_tags_preserve_class(self):
        with pytest.raises(ValidationError, match=r"\[stage demo\]"):
            with harness._Stage("demo"):
                raise ValidationError("boom")
