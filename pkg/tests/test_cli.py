"""Command-line client: exit codes, artifacts, determinism, env-var config."""

from textwrap import dedent

import pytest

from madseg.cli import CONFIG_ENV_VAR, main
from madseg.config import parse_file

from conftest import TINY_SIZE


def run_cli(argv):
    """Invoke the CLI and return its exit code."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory, corpus_root):
    path = tmp_path_factory.mktemp("cli") / "run.cfg"
    path.write_text(
        dedent(
            f"""\
            [dataset]
            root = {corpus_root}
            category = stripes
            texture_dir = {corpus_root / "textures"}

            [train]
            steps = 6
            batch_size = 4
            warmup_steps = 2
            image_size = {TINY_SIZE}
            base_width = 4
            memory_n = 4
            occ_count = 2
            occ_components = 2
            labeler_refresh_every = 3
            labeler_pool = 8
            projection_dim = 4
            plateau_window = 3
            plateau_patience = 100
            """
        )
    )
    return str(path)


@pytest.fixture(scope="module")
def cli_checkpoint(cli_config, tmp_path_factory):
    """A checkpoint produced by `madseg train` for downstream commands."""
    ckpt = tmp_path_factory.mktemp("cli-train") / "model.ckpt"
    code = run_cli(
        ["train", "--config", cli_config, "--out", str(ckpt), "--quiet"]
    )
    assert code == 0
    return ckpt


class TestExitCodes:
    def test_missing_config_flag_exits_2(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
        code = run_cli(["train", "--out", str(tmp_path / "m.ckpt")])
        assert code == 2
        assert "error (config):" in capsys.readouterr().err

    def test_nonexistent_config_file_exits_2(self, tmp_path, capsys):
        code = run_cli(
            ["train", "--config", str(tmp_path / "no.cfg"), "--out", str(tmp_path / "m")]
        )
        assert code == 2
        assert "error (config):" in capsys.readouterr().err

    def test_bad_config_value_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[train]\nsteps = -5\n")
        code = run_cli(
            ["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]
        )
        assert code == 2
        assert "train.steps" in capsys.readouterr().err

    def test_missing_dataset_exits_3(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"[dataset]\nroot = {tmp_path / 'absent'}\ncategory = stripes\n"
        )
        code = run_cli(
            ["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]
        )
        assert code == 3
        assert "error (data):" in capsys.readouterr().err

    def test_corrupt_checkpoint_exits_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        code = run_cli(
            ["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "out")]
        )
        assert code == 3
        assert "error (data):" in capsys.readouterr().err


class TestPipelineCommands:
    def test_synth_writes_corpus(self, tmp_path, capsys):
        code = run_cli(
            [
                "synth", "--out", str(tmp_path),
                "--size", str(TINY_SIZE),
                "--n-train", "6", "--n-test-normal", "2", "--n-test-anomalous", "2",
            ]
        )
        assert code == 0
        assert "corpus:" in capsys.readouterr().out
        assert (tmp_path / "stripes" / "train" / "good").is_dir()
        assert (tmp_path / "textures").is_dir()

    def test_train_writes_checkpoint_and_log(self, cli_checkpoint):
        assert cli_checkpoint.is_file()
        assert cli_checkpoint.with_name("model.ckpt.log.csv").is_file()

    def test_train_is_deterministic_under_fixed_seed(
        self, cli_config, cli_checkpoint, tmp_path
    ):
        """Re-training with the same seed reproduces the checkpoint bytes."""
        again = tmp_path / "again.ckpt"
        code = run_cli(
            ["train", "--config", cli_config, "--out", str(again), "--quiet"]
        )
        assert code == 0
        assert again.read_bytes() == cli_checkpoint.read_bytes()

    def test_train_seed_override_changes_the_model(
        self, cli_config, cli_checkpoint, tmp_path
    ):
        other = tmp_path / "other.ckpt"
        code = run_cli(
            [
                "train", "--config", cli_config, "--out", str(other),
                "--seed", "7", "--quiet",
            ]
        )
        assert code == 0
        assert other.read_bytes() != cli_checkpoint.read_bytes()

    def test_eval_reports_auroc(self, cli_checkpoint, tmp_path, capsys):
        code = run_cli(
            ["eval", "--checkpoint", str(cli_checkpoint), "--out", str(tmp_path)]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "AUROC" in out and "stripes" in out
        assert (tmp_path / "scores.csv").is_file()

    def test_score_prints_both_scores(self, cli_checkpoint, corpus_root, capsys):
        img = sorted((corpus_root / "stripes" / "test" / "good").iterdir())[0]
        code = run_cli(
            ["score", "--checkpoint", str(cli_checkpoint), "--image", str(img)]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "image score:" in out and "latent score:" in out

    def test_simulate_writes_requested_pairs(self, cli_config, tmp_path, capsys):
        code = run_cli(
            [
                "simulate", "--config", cli_config, "--out", str(tmp_path),
                "--count", "2",
            ]
        )
        assert code == 0
        assert (tmp_path / "manifest.csv").is_file()
        assert (tmp_path / "0001_mask.png").is_file()

    def test_config_comes_from_environment_when_flag_absent(
        self, cli_config, tmp_path, capsys, monkeypatch
    ):
        monkeypatch.setenv(CONFIG_ENV_VAR, cli_config)
        code = run_cli(["simulate", "--out", str(tmp_path), "--count", "1"])
        assert code == 0
        assert (tmp_path / "0000_image.png").is_file()


class TestInitConfig:
    def test_emitted_template_parses_back(self, tmp_path):
        out = tmp_path / "default.cfg"
        assert run_cli(["init-config", "--out", str(out)]) == 0
        rc = parse_file(out)
        assert rc.get("train", "steps") == 500

    def test_template_goes_to_stdout_without_out(self, capsys):
        assert run_cli(["init-config"]) == 0
        assert "[train]" in capsys.readouterr().out
