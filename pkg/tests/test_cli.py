import re
import sys
from unittest.mock import patch

import pytest
import typer
from typer.testing import CliRunner

import tempomesh.cli as cli
from tempomesh.checkpoint import save_checkpoint
from tempomesh.cli import EXIT_CONFIG, EXIT_RUNTIME, EXIT_USAGE, app, build_overrides, signal_handler, version_callback
from tempomesh.config import RESOLVED_CONFIG_NAME, save_settings
from tempomesh.formats import write_obj
from tempomesh.geometry import box_mesh, icosphere
from tempomesh.history import RUNS_FILE_NAME, RunHistory
from tempomesh.pipeline import checkpoint_path
from tempomesh.vae3d import ShapeAutoencoder

from tests.conftest import tiny_settings

# Create a test runner with specific settings
runner = CliRunner(mix_stderr=True)


def clean_rich_output(text):
    """Remove Rich formatting from text while preserving the actual content."""
    ansi_escape = re.compile(r"\x1B(?:[@-Z\\-_]|\[[0-?]*[ -/]*[@-~])")
    text_no_ansi = ansi_escape.sub("", text)
    box_chars = r"[┌┐└┘│─╭╮╰╯├┤┬┴┼╔╗╚╝║═╞╡╤╧╫╪█░▒▓]"
    text_no_box = re.sub(box_chars, "", text_no_ansi)
    return re.sub(r"\s+", " ", text_no_box).strip()


@pytest.fixture
def config_file(tmp_path):
    """Tiny settings written to a TOML file."""
    return save_settings(tiny_settings(), tmp_path / "tiny.toml")


@pytest.fixture
def checkpoint_dir(tmp_path, tiny_models):
    """Checkpoints of the untrained tiny models."""
    directory = tmp_path / "ckpt"
    for phase, model in (("vae", tiny_models.vae), ("diffusion", tiny_models.diffusion), ("tae", tiny_models.tae)):
        save_checkpoint(checkpoint_path(directory, phase), model.state_dict(), metadata=model.checkpoint_metadata())
    return directory


@pytest.fixture
def sphere_meshes(monkeypatch):
    """Every extraction yields the same small sphere."""
    monkeypatch.setattr(ShapeAutoencoder, "extract_mesh", lambda self, z, resolution: icosphere(1, 0.5))


def test_version_command():
    """Test version command and callback"""
    result = runner.invoke(app, ["--version"])
    assert result.exit_code == 0
    assert "Tempomesh version:" in result.stdout

    assert version_callback(False) is None
    with pytest.raises(typer.Exit):
        version_callback(True)


def test_help_lists_commands():
    result = runner.invoke(app, ["--help"], env={"NO_COLOR": "1", "TERM": "dumb"})
    assert result.exit_code == 0
    clean_output = clean_rich_output(result.output)
    for command in ("gen-data", "train-vae", "train-diffusion", "train-tae", "infer", "rollout", "eval", "ablate"):
        assert command in clean_output


def test_build_overrides():
    """Test that flags land in the right sections and unset flags stay out"""
    overrides = build_overrides(seed=5, context_window=2, grid=None, eval={"baselines": False})
    assert overrides["vae"]["seed"] == 5
    assert overrides["eval"] == {"baselines": False, "seed": 5}
    assert overrides["inference"]["context_window_stage1"] == 2
    assert overrides["inference"]["context_window_stage2"] == 2
    assert "grid" not in overrides["inference"]
    assert build_overrides() == {"inference": {}}


def test_missing_config_exits_with_config_code(tmp_path):
    result = runner.invoke(app, ["gen-data", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "d")])
    assert result.exit_code == EXIT_CONFIG
    assert "Configuration error" in clean_rich_output(result.output)


def test_invalid_config_value_exits_with_config_code(tmp_path, config_file):
    """Test that a value failing validation exits with 2"""
    result = runner.invoke(
        app, ["rollout", "--config", str(config_file), "--context-window", "9", "--family", "bending-bar"]
    )
    assert result.exit_code == EXIT_CONFIG
    assert "context_window_stage1" in clean_rich_output(result.output)


def test_gen_data(tmp_path, config_file):
    """Test that a split, its config snapshot and a history session are written"""
    out = tmp_path / "data"
    ckpt = tmp_path / "ckpt"
    result = runner.invoke(
        app,
        ["gen-data", "--out", str(out), "--count", "2", "--config", str(config_file), "--checkpoint-dir", str(ckpt)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "dataset.toml").exists()
    assert len(list((out / "scenes").iterdir())) == 2
    assert (out / RESOLVED_CONFIG_NAME).exists()
    session = RunHistory(ckpt / RUNS_FILE_NAME).get_last_session()
    assert session["command"] == "gen-data"
    assert session["status"] == "completed"
    assert session["events"][0]["type"] == "dataset"

    again = runner.invoke(app, ["gen-data", "--out", str(out), "--config", str(config_file)])
    assert again.exit_code == EXIT_RUNTIME
    assert "not empty" in clean_rich_output(again.output)


def test_gen_data_bad_split(tmp_path, config_file):
    result = runner.invoke(app, ["gen-data", "--split", "test", "--out", str(tmp_path / "d")])
    assert result.exit_code == 2
    assert "unknown split" in clean_rich_output(result.output)


def test_infer_without_checkpoints(tmp_path, config_file):
    """Test that missing checkpoints fail the run with exit code 3"""
    ckpt = tmp_path / "empty"
    result = runner.invoke(
        app,
        ["infer", "--family", "bending-bar", "--config", str(config_file), "--checkpoint-dir", str(ckpt),
         "--out", str(tmp_path / "run")],
    )
    assert result.exit_code == EXIT_RUNTIME
    session = RunHistory(ckpt / RUNS_FILE_NAME).get_last_session()
    assert session["status"] == "failed"
    assert "missing checkpoints" in session["events"][-1]["reason"]


def test_infer_from_family(tmp_path, config_file, checkpoint_dir, sphere_meshes):
    out = tmp_path / "run"
    result = runner.invoke(
        app,
        ["infer", "--family", "two-link-arm", "--family-seed", "3", "--config", str(config_file),
         "--checkpoint-dir", str(checkpoint_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "animated" / "animation.manifest").exists()
    assert (out / "latents.npy").exists()
    assert "Generation" in clean_rich_output(result.output)


def test_infer_usage_errors(tmp_path, config_file, checkpoint_dir, sphere_meshes):
    """Test missing conditioning and windows longer than the model"""
    base = ["--config", str(config_file), "--checkpoint-dir", str(checkpoint_dir)]
    no_cond = runner.invoke(app, ["infer", *base, "--out", str(tmp_path / "a")])
    assert no_cond.exit_code == 2
    too_long = runner.invoke(app, ["infer", "--family", "bending-bar", "--frames", "9", *base, "--out", str(tmp_path / "b")])
    assert too_long.exit_code == 2
    assert "use rollout" in clean_rich_output(too_long.output)


def test_infer_scores_a_scene_and_exports(tmp_path, config_file, checkpoint_dir, sphere_meshes, tiny_eval):
    """Test generation from a held-out scene, then re-export with its metrics"""
    scene = tiny_eval.scenes[0]
    out = tmp_path / "run"
    result = runner.invoke(
        app,
        ["infer", "--scene", str(scene.root), "--source-frame", "0", "--config", str(config_file),
         "--checkpoint-dir", str(checkpoint_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert "cd4d" in clean_rich_output(result.output)
    assert (out / "metrics.txt").exists()

    exported = tmp_path / "export"
    result = runner.invoke(
        app,
        ["export", "--animation", str(out / "animated" / "animation.manifest"), "--out", str(exported),
         "--no-render", "--config", str(config_file), "--checkpoint-dir", str(checkpoint_dir)],
    )
    assert result.exit_code == 0, result.output
    assert (exported / "metrics.txt").exists()
    assert (exported / "animated" / "frame_0000.obj").exists()


def test_rollout_command(tmp_path, config_file, checkpoint_dir, sphere_meshes):
    out = tmp_path / "long"
    result = runner.invoke(
        app,
        ["rollout", "--family", "pulsing-ellipsoid", "--frames", "7", "--config", str(config_file),
         "--checkpoint-dir", str(checkpoint_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "animated" / "frame_0006.obj").exists()


def test_transfer_command(tmp_path, config_file, checkpoint_dir, sphere_meshes, tiny_eval):
    """Test that the reference mesh keeps its faces"""
    reference = write_obj(tmp_path / "box.obj", box_mesh((0.5, 0.5, 0.5), (1, 1, 1)))
    out = tmp_path / "moved"
    result = runner.invoke(
        app,
        ["transfer", "--source-cond", str(tiny_eval.scenes[0].root), "--reference-mesh", str(reference),
         "--config", str(config_file), "--checkpoint-dir", str(checkpoint_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "animated" / "animation.manifest").exists()


def test_eval_command(tmp_path, config_file, checkpoint_dir, sphere_meshes, tiny_dataset_root):
    out = tmp_path / "eval"
    result = runner.invoke(
        app,
        ["eval", "--data", str(tiny_dataset_root / "eval"), "--train-data", str(tiny_dataset_root / "train"),
         "--no-baselines", "--config", str(config_file), "--checkpoint-dir", str(checkpoint_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "aggregate_full.txt").exists()
    assert "Evaluation" in clean_rich_output(result.output)


def test_eval_command_overlapping_splits(tmp_path, config_file, checkpoint_dir, tiny_dataset_root):
    """Test that evaluating on training scenes is refused"""
    result = runner.invoke(
        app,
        ["eval", "--data", str(tiny_dataset_root / "train"), "--train-data", str(tiny_dataset_root / "train"),
         "--config", str(config_file), "--checkpoint-dir", str(checkpoint_dir), "--out", str(tmp_path / "eval")],
    )
    assert result.exit_code == EXIT_RUNTIME
    assert "share" in clean_rich_output(result.output)


def test_ablate_command(tmp_path, config_file, checkpoint_dir, sphere_meshes, tiny_dataset_root):
    """Test an ablation whose variants reuse the given checkpoints"""
    out = tmp_path / "ablation"
    args = ["ablate", "--train-data", str(tiny_dataset_root / "train"), "--eval-data", str(tiny_dataset_root / "eval"),
            "--base-checkpoints", str(checkpoint_dir), "--config", str(config_file),
            "--checkpoint-dir", str(checkpoint_dir)]
    result = runner.invoke(app, [*args, "--axis", "context_window", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "context-1" in clean_rich_output(result.output)
    assert (out / "ablation_context_window.txt").exists()

    result = runner.invoke(app, [*args, "--axis", "dropout", "--out", str(tmp_path / "other")])
    assert result.exit_code == EXIT_CONFIG
    assert "unknown ablation axis" in clean_rich_output(result.output)


def test_history_command_empty(tmp_path):
    result = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path)])
    assert result.exit_code == 0
    assert "No sessions in history" in clean_rich_output(result.output)


def test_history_command_with_sessions(tmp_path):
    """Test the session table and the details of one session"""
    runs = RunHistory(tmp_path / RUNS_FILE_NAME)
    runs.start_session("train-vae", tmp_path / "ckpt")
    runs.record_checkpoint("vae", 5, 0.5, tmp_path / "vae.ckpt", "abc")
    runs.close_session("completed")

    result = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path)])
    assert result.exit_code == 0
    clean_output = clean_rich_output(result.output)
    assert "train-vae" in clean_output
    assert "completed" in clean_output

    details = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path), "--session", "1"])
    assert details.exit_code == 0
    assert "checkpoint" in clean_rich_output(details.output)

    last = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path), "--last-session"])
    assert "Session Details" in clean_rich_output(last.output)

    missing = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path), "--session", "9"])
    assert missing.exit_code == EXIT_USAGE


def test_history_clear(tmp_path):
    runs = RunHistory(tmp_path / RUNS_FILE_NAME)
    runs.start_session("eval")
    cancelled = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path), "--clear-history"], input="n\n")
    assert "cancelled" in clean_rich_output(cancelled.output)
    assert RunHistory(tmp_path / RUNS_FILE_NAME).sessions
    result = runner.invoke(app, ["history", "--checkpoint-dir", str(tmp_path), "--clear-history"], input="y\n")
    assert "History cleared" in clean_rich_output(result.output)
    assert RunHistory(tmp_path / RUNS_FILE_NAME).sessions == []


def test_main_maps_usage_errors():
    """Test that the console entry point exits with 1 on unknown commands"""
    with patch.object(sys, "argv", ["tempomesh", "no-such-command"]):
        with pytest.raises(SystemExit) as exc_info:
            cli.main()
    assert exc_info.value.code == EXIT_USAGE


def test_signal_handler(tmp_path):
    """Test that an interrupt closes the open session"""
    runs = RunHistory(tmp_path / RUNS_FILE_NAME)
    runs.start_session("train-tae")
    with patch.object(cli, "_current_history", runs):
        with pytest.raises(SystemExit) as exc_info:
            signal_handler(2, None)
    assert exc_info.value.code == EXIT_USAGE
    assert runs.get_last_session()["status"] == "interrupted"


def test_signal_handler_without_history():
    with patch.object(cli, "_current_history", None):
        with pytest.raises(SystemExit):
            signal_handler(15, None)
