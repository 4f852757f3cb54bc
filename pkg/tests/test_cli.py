import json
import subprocess
import sys

import pytest

from fieldcascade.cli import main


@pytest.fixture(scope="module")
def cli_artifacts(tmp_path_factory):
    """Micro dataset + trained bundle shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    fae_dir = root / "fae_run"
    bundle_dir = root / "bundle"
    assert main([
        "gen-data", "--out", str(data_dir),
        "--height", "8", "--width", "16",
        "--n-configs", "3", "--snapshots-per-config", "2",
        "--train-configs", "2", "--seed", "0",
    ]) == 0
    assert main([
        "train-fae", "--dataset", str(data_dir), "--out", str(fae_dir),
        "--epochs", "2", "--batch-size", "2", "--latent-dim", "8", "--seed", "0",
    ]) == 0
    assert main([
        "train-cdm", "--dataset", str(data_dir), "--fae", str(fae_dir),
        "--out", str(bundle_dir), "--epochs", "2", "--batch-size", "2",
        "--timesteps", "10", "--train-ratio", "0.05",
        "--sigma-sq", "1.0", "--seed", "0",
    ]) == 0
    return data_dir, fae_dir, bundle_dir


class TestGenData:
    def test_snapshot_count_and_split(self, cli_artifacts):
        data_dir, _, _ = cli_artifacts
        manifest = json.loads((data_dir / "dataset.json").read_text())
        assert len(manifest["snapshots"]) == 6  # 3 configs x 2 snapshots
        assert manifest["split"]["train_configs"] == [0, 1]
        assert manifest["split"]["test_configs"] == [2]
        assert (data_dir / "plots" / "example_field.png").is_file()
        assert (data_dir / "config.snapshot").is_file()
        assert (data_dir / "manifest.json").is_file()

    def test_rerun_byte_identical_dataset(self, tmp_path):
        args = lambda out: [
            "gen-data", "--out", str(out), "--height", "8", "--width", "16",
            "--n-configs", "2", "--snapshots-per-config", "2",
            "--train-configs", "1", "--seed", "3",
        ]
        assert main(args(tmp_path / "a")) == 0
        assert main(args(tmp_path / "b")) == 0
        for rel in ("snapshots/cfg000_t000/values.bin", "snapshots/cfg001_t001/values.bin"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestTrainSubcommands:
    def test_train_fae_outputs(self, cli_artifacts):
        _, fae_dir, _ = cli_artifacts
        assert (fae_dir / "autoencoder" / "checkpoint.json").is_file()
        history = (fae_dir / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,loss,val_rmse"
        assert len(history) == 3
        assert (fae_dir / "plots" / "loss.png").is_file()

    def test_train_cdm_outputs(self, cli_artifacts):
        _, _, bundle_dir = cli_artifacts
        assert (bundle_dir / "cascade.json").is_file()
        assert (bundle_dir / "autoencoder" / "checkpoint.json").is_file()
        assert (bundle_dir / "denoiser" / "checkpoint.json").is_file()
        manifest = json.loads((bundle_dir / "cascade.json").read_text())
        assert manifest["train_ratio"] == 0.05
        assert manifest["guidance"]["sigma_sq"] == 1.0


class TestReconstruct:
    def test_rerun_byte_identical_fields(self, cli_artifacts, tmp_path):
        data_dir, _, bundle_dir = cli_artifacts

        def run(out):
            return main([
                "reconstruct", "--bundle", str(bundle_dir), "--dataset", str(data_dir),
                "--ratio", "0.05", "--mask-seed", "1", "--seed", "7", "--out", str(out),
            ])

        assert run(tmp_path / "r1") == 0
        assert run(tmp_path / "r2") == 0
        for rel in ("fields/full/values.bin", "fields/principal/values.bin", "fields/detail/values.bin"):
            assert (tmp_path / "r1" / rel).read_bytes() == (tmp_path / "r2" / rel).read_bytes()
        assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
        assert (tmp_path / "r1" / "plots" / "reconstruction.png").is_file()

    def test_unknown_snapshot_id_fails(self, cli_artifacts, tmp_path):
        data_dir, _, bundle_dir = cli_artifacts
        code = main([
            "reconstruct", "--bundle", str(bundle_dir), "--dataset", str(data_dir),
            "--snapshot", "nope", "--out", str(tmp_path / "r"),
        ])
        assert code == 2


class TestSweep:
    def test_outputs_and_rerun_identical(self, cli_artifacts, tmp_path):
        data_dir, _, bundle_dir = cli_artifacts

        def run(out):
            return main([
                "sweep", "--bundle", str(bundle_dir), "--dataset", str(data_dir),
                "--ratios", "0.05,0.2", "--masks-per-ratio", "1",
                "--samples-per-mask", "2", "--out", str(out),
            ])

        assert run(tmp_path / "s1") == 0
        assert run(tmp_path / "s2") == 0
        assert (tmp_path / "s1" / "metrics.csv").read_bytes() == (tmp_path / "s2" / "metrics.csv").read_bytes()
        assert (tmp_path / "s1" / "summary.csv").read_bytes() == (tmp_path / "s2" / "summary.csv").read_bytes()
        for ratio in ("0.05", "0.2"):
            assert (tmp_path / "s1" / f"kde_{ratio}.csv").is_file()
        assert (tmp_path / "s1" / "plots" / "kde.png").is_file()
        assert (tmp_path / "s1" / "plots" / "rmse_vs_ratio.png").is_file()
        assert (tmp_path / "s1" / "timings.csv").is_file()
        rows = (tmp_path / "s1" / "metrics.csv").read_text().splitlines()
        assert rows[0] == "ratio,mask_seed,sample_seed,rmse,observed_mean_abs_residual"
        assert len(rows) == 5  # 2 ratios x 1 mask x 2 samples

    def test_missing_bundle_exits_2(self, cli_artifacts, tmp_path, capsys):
        data_dir, _, _ = cli_artifacts
        code = main([
            "sweep", "--bundle", str(tmp_path / "missing"), "--dataset", str(data_dir),
            "--out", str(tmp_path / "s"),
        ])
        assert code == 2
        err = capsys.readouterr().err
        assert "cascade" in err and "manifest" in err

    def test_bad_ratio_list_exits_2(self, cli_artifacts, tmp_path):
        data_dir, _, bundle_dir = cli_artifacts
        code = main([
            "sweep", "--bundle", str(bundle_dir), "--dataset", str(data_dir),
            "--ratios", "0.2,0.05", "--out", str(tmp_path / "s"),
        ])
        assert code == 2


class TestEvalFae:
    def test_outputs(self, cli_artifacts, tmp_path):
        data_dir, fae_dir, _ = cli_artifacts
        out = tmp_path / "eval"
        assert main([
            "eval-fae", "--fae", str(fae_dir), "--dataset", str(data_dir),
            "--ratios", "0.1,0.5", "--masks-per-ratio", "5", "--out", str(out),
        ]) == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "ratio,mask_seed,rmse"
        assert len(rows) == 11
        assert (out / "plots" / "kde_fae.png").is_file()
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 3


class TestExportLatents:
    def test_outputs(self, cli_artifacts, tmp_path):
        data_dir, fae_dir, _ = cli_artifacts
        out = tmp_path / "latents"
        assert main([
            "export-latents", "--fae", str(fae_dir), "--dataset", str(data_dir),
            "--out", str(out),
        ]) == 0
        rows = (out / "latents.csv").read_text().splitlines()
        assert len(rows) == 7  # header + 6 snapshots
        assert rows[0].startswith("id,z0,")


class TestUsageErrors:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["gen-data"]) == 1

    def test_no_subcommand(self):
        assert main([]) == 1


class TestConfigFile:
    def test_file_values_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nheight = 8\nwidth = 16\nn-configs = 2\n"
                       "snapshots-per-config = 1\ntrain-configs = 1\nseed = 5\n")
        out = tmp_path / "ds"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 9  # flag wins
        assert manifest["config"]["height"] == 8  # file value used
        snapshot = (out / "config.snapshot").read_text()
        assert "seed = 9" in snapshot


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "fieldcascade.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
