import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from diffeovar import fieldio
from diffeovar.cli import main


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    assert run_cli("phantom", "--size", 48, "--out-dir", root / "phantom") == 0
    common = [
        "--template", root / "phantom" / "template.pgm",
        "--realizations", 3,
        "--noise-std", "0,0.3",
        "--noise-corr", "0",
        "--magnitude", "2.0",
    ]
    assert run_cli("simulate", *common, "--out-dir", root / "data") == 0
    assert (
        run_cli(
            "register",
            "--dataset", root / "data",
            "--out-dir", root / "runs",
            "--realizations", 3,
            "--methods", "lddmm",
            "--noise-std", "0,0.3",
            "--noise-corr", "0",
            "--max-iters", 40,
        )
        == 0
    )
    assert (
        run_cli(
            "stats",
            "--dataset", root / "data",
            "--runs", root / "runs",
            "--out-dir", root / "stats",
            "--realizations", 3,
            "--methods", "lddmm",
            "--noise-std", "0,0.3",
            "--noise-corr", "0",
        )
        == 0
    )
    return root


class TestPhantom:
    def test_outputs_and_probes(self, tmp_path):
        assert run_cli("phantom", "--size", 48, "--out-dir", tmp_path) == 0
        img = fieldio.read_pgm(tmp_path / "template.pgm")
        assert img.shape == (48, 48)
        assert set(np.unique(img)) == {0.0, 1.0}
        meta = json.loads((tmp_path / "phantom.json").read_text())
        assert set(meta["probes"]) == {"boundary", "interior", "intermediate"}

    def test_deterministic(self, tmp_path):
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "a")
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "b")
        assert file_hash(tmp_path / "a" / "template.pgm") == file_hash(
            tmp_path / "b" / "template.pgm"
        )


class TestSimulate:
    def test_manifest_and_bundles(self, pipeline):
        manifest = (pipeline / "data" / "manifest.csv").read_text().strip().split("\n")
        assert manifest[0].startswith("realization,mode,")
        assert len(manifest) == 1 + 3 * 2  # 3 realizations x 2 noise levels
        assert (pipeline / "data" / "real0000" / "v0.f32").exists()
        assert (pipeline / "data" / "real0000" / "target_std0.3_corr0.f32").exists()

    def test_measured_noise_matches_nominal(self, pipeline):
        rows = (pipeline / "data" / "manifest.csv").read_text().strip().split("\n")[1:]
        for row in rows:
            cols = row.split(",")
            nominal, measured = float(cols[3]), float(cols[6])
            if nominal > 0:
                assert abs(measured - nominal) <= 0.02 * nominal

    def test_identity_mode_noise_free_target_is_template(self, tmp_path):
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "ph")
        run_cli(
            "simulate",
            "--template", tmp_path / "ph" / "template.pgm",
            "--out-dir", tmp_path / "data",
            "--realizations", 1,
            "--deformation", "identity",
            "--noise-std", "0",
            "--noise-corr", "0",
        )
        template = fieldio.read_field(tmp_path / "data" / "template.f32")
        target = fieldio.read_field(
            tmp_path / "data" / "real0000" / "target_std0_corr0.f32"
        )
        np.testing.assert_array_equal(template.values, target.values)

    def test_same_seed_reproduces_manifest(self, tmp_path):
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "ph")
        for sub in ("a", "b"):
            run_cli(
                "simulate",
                "--template", tmp_path / "ph" / "template.pgm",
                "--out-dir", tmp_path / sub,
                "--realizations", 2,
                "--noise-std", "0.3",
                "--noise-corr", "0",
                "--base-seed", 7,
            )
        assert file_hash(tmp_path / "a" / "manifest.csv") == file_hash(
            tmp_path / "b" / "manifest.csv"
        )


class TestRegister:
    def test_outputs_per_realization(self, pipeline):
        for k in range(3):
            d = pipeline / "runs" / f"real{k:04d}"
            assert (d / "lddmm_std0.3_corr0_logdet.f32").exists()
            assert (d / "lddmm_std0.3_corr0_energy.csv").exists()
            info = json.loads((d / "lddmm_std0.3_corr0.done").read_text())
            assert info["iterations"] >= 1

    def test_energy_traces_are_monotone(self, pipeline):
        path = pipeline / "runs" / "real0000" / "lddmm_std0.3_corr0_energy.csv"
        rows = path.read_text().strip().split("\n")[1:]
        totals = [float(r.split(",")[3]) for r in rows]
        assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))

    def test_resume_skips_completed(self, pipeline, capsys):
        code = run_cli(
            "register",
            "--dataset", pipeline / "data",
            "--out-dir", pipeline / "runs",
            "--realizations", 3,
            "--methods", "lddmm",
            "--noise-std", "0,0.3",
            "--noise-corr", "0",
            "--max-iters", 40,
        )
        assert code == 0


class TestStats:
    def test_rmse_outputs(self, pipeline):
        stats = pipeline / "stats"
        assert (stats / "rmse_lddmm_std0.3_corr0.f32").exists()
        assert (stats / "rmse_lddmm_std0.3_corr0.png").exists()
        curves = (stats / "rmse_curves.csv").read_text().strip().split("\n")
        assert curves[0] == "noise_std,method,noise_corr,probe,pixel_i,pixel_j,rmse"
        assert len(curves) > 1

    def test_rmse_field_nonnegative(self, pipeline):
        rmse = fieldio.read_field(pipeline / "stats" / "rmse_lddmm_std0.3_corr0.f32")
        assert np.min(rmse.values) >= 0.0

    def test_too_few_realizations_rejected(self, pipeline, tmp_path):
        with pytest.raises(SystemExit):
            run_cli(
                "stats",
                "--dataset", pipeline / "data",
                "--runs", pipeline / "runs",
                "--out-dir", tmp_path,
                "--realizations", 1,
                "--methods", "lddmm",
                "--noise-std", "0.3",
                "--noise-corr", "0",
            )


class TestDeterminismAcrossWorkers:
    def test_worker_count_does_not_change_outputs(self, tmp_path):
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "ph")
        hashes = {}
        for workers, sub in ((1, "w1"), (2, "w2")):
            run_cli(
                "simulate",
                "--template", tmp_path / "ph" / "template.pgm",
                "--out-dir", tmp_path / sub,
                "--realizations", 4,
                "--noise-std", "0,0.3",
                "--noise-corr", "0",
                "--workers", workers,
            )
            run_cli(
                "register",
                "--dataset", tmp_path / sub,
                "--out-dir", tmp_path / f"{sub}_runs",
                "--realizations", 4,
                "--methods", "lddmm",
                "--noise-std", "0.3",
                "--noise-corr", "0",
                "--max-iters", 25,
                "--workers", workers,
            )
            run_cli(
                "stats",
                "--dataset", tmp_path / sub,
                "--runs", tmp_path / f"{sub}_runs",
                "--out-dir", tmp_path / f"{sub}_stats",
                "--realizations", 4,
                "--methods", "lddmm",
                "--noise-std", "0.3",
                "--noise-corr", "0",
            )
            hashes[sub] = (
                file_hash(tmp_path / sub / "manifest.csv"),
                file_hash(tmp_path / f"{sub}_stats" / "rmse_curves.csv"),
            )
        assert hashes["w1"] == hashes["w2"]

    def test_thread_env_caps_workers(self, tmp_path, monkeypatch):
        from diffeovar.cli import _worker_count

        monkeypatch.setenv("DIFFEOVAR_THREADS", "2")
        assert _worker_count(8) == 2
        monkeypatch.delenv("DIFFEOVAR_THREADS")
        assert _worker_count(8) == 8


class TestConfigFile:
    def test_config_provides_defaults_flags_override(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("size=48\nsmooth_px=1.0\n")
        run_cli("phantom", "--config", cfg, "--out-dir", tmp_path / "a")
        meta = json.loads((tmp_path / "a" / "phantom.json").read_text())
        assert meta["size"] == 48 and meta["smooth_px"] == 1.0
        run_cli("phantom", "--config", cfg, "--smooth-px", 0.0,
                "--out-dir", tmp_path / "b")
        meta_b = json.loads((tmp_path / "b" / "phantom.json").read_text())
        assert meta_b["smooth_px"] == 0.0


class TestCrbCommand:
    def test_small_crb_run(self, tmp_path):
        run_cli("phantom", "--size", 48, "--out-dir", tmp_path / "ph")
        code = run_cli(
            "crb",
            "--template", tmp_path / "ph" / "template.pgm",
            "--out-dir", tmp_path / "crb",
            "--downsample", "8",
            "--sigma-v", "0.1,3.33,inf",
        )
        assert code == 0
        summary = (tmp_path / "crb" / "crb_summary.csv").read_text().strip().split("\n")
        assert len(summary) == 4
        assert (tmp_path / "crb" / "crb_down8_sigmaV0.1.png").exists()


class TestStabilizerCommand:
    def test_panels_and_residuals(self, tmp_path):
        run_cli("phantom", "--size", 48, "--smooth-px", 1.5, "--out-dir", tmp_path / "ph")
        code = run_cli(
            "stabilizer",
            "--template", tmp_path / "ph" / "template.pgm",
            "--out-dir", tmp_path / "stab",
        )
        assert code == 0
        rows = (tmp_path / "stab" / "stabilizer.csv").read_text().strip().split("\n")[1:]
        by_name = {r.split(",")[0]: float(r.split(",")[1]) for r in rows}
        assert by_name["identity"] == 0.0
        assert (tmp_path / "stab" / "tangent0_grid.png").exists()
