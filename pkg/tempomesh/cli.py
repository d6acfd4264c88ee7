import signal
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Optional

import click
import numpy as np
import typer
from loguru import logger
from rich import box
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
    TimeRemainingColumn,
)
from rich.table import Table

from tempomesh import __version__
from tempomesh.config import PipelineConfig, get_settings, write_resolved_config
from tempomesh.dataset import Scene, assert_disjoint, generate_dataset, load_dataset
from tempomesh.errors import ConfigError, TempomeshError
from tempomesh.families import FAMILY_KINDS, cond_descriptor, make_framesteps, random_family
from tempomesh.formats import read_animation, read_descriptor, read_obj
from tempomesh.geometry import AnimatedMesh, MeshSequence
from tempomesh.history import RUNS_FILE_NAME, RunHistory
from tempomesh.logger import configure_run_logging
from tempomesh.metrics import MetricsReport, score_scene
from tempomesh.numerics import make_rng
from tempomesh.pipeline import (
    ABLATION_AXES,
    Models,
    SceneResult,
    autoregressive_rollout,
    evaluate,
    export_scene,
    frozen_vae_hash,
    infer_sequence_to_4d,
    run_ablation,
    scene_cond,
    train_diffusion_stage,
    train_tae_stage,
    train_vae_stage,
    transfer as transfer_motion,
)
from tempomesh.security import OutputGuard
from tempomesh.tdiff import CondSignal

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SEEDED_SECTIONS = ("dataset", "vae", "diffusion", "tae", "inference", "eval")
DEFAULT_CHECKPOINT_DIR = Path("checkpoints")

# Global variable to hold the current history instance for signal handlers
_current_history: Optional[RunHistory] = None


def signal_handler(sig, frame):
    """Mark the active session as interrupted and exit.

    Args:
        sig: Signal number
        frame: Current stack frame
    """
    global _current_history

    if _current_history is not None and _current_history.current_session is not None:
        _current_history.close_session("interrupted")
        logger.warning("RUN [INTERRUPTED] | session closed on termination signal")

    sys.exit(EXIT_USAGE)


signal.signal(signal.SIGINT, signal_handler)  # Ctrl+C
signal.signal(signal.SIGTERM, signal_handler)  # kill command

app = typer.Typer(
    name="tempomesh",
    help="Tempomesh - generate animated meshes that keep one topology across frames.",
    add_completion=False,
    no_args_is_help=True,
    rich_markup_mode="rich",
    pretty_exceptions_show_locals=False,
    pretty_exceptions_enable=False,
    context_settings={"help_option_names": ["-h", "--help"]},
)
console = Console()


def version_callback(value: bool):
    """Show the application version and exit if the --version flag is used."""
    if value:
        typer.echo(f"Tempomesh version: {__version__}")
        raise typer.Exit()


@app.callback()
def main_callback(
    version: bool = typer.Option(
        None,
        "--version",
        "-v",
        help="Show the application version and exit",
        callback=version_callback,
        is_eager=True,
    ),
):
    """Tempomesh command line interface."""


# Shared options and helpers


ConfigOption = typer.Option(None, "--config", "-c", help="TOML configuration file", show_default=False)
SeedOption = typer.Option(None, "--seed", help="Seed for every section that has one", show_default=False)
ForceOption = typer.Option(False, "--force", help="Write into a non-empty output directory")
CheckpointDirOption = typer.Option(
    DEFAULT_CHECKPOINT_DIR, "--checkpoint-dir", help="Directory of vae.ckpt, diffusion.ckpt, tae.ckpt and runs.json"
)


def build_overrides(
    seed: Optional[int] = None,
    context_window: Optional[int] = None,
    flow_steps: Optional[int] = None,
    grid: Optional[int] = None,
    **sections: dict,
) -> dict:
    """Per-section overrides from command line flags; ``None`` means not given."""
    overrides: dict = {name: dict(values) for name, values in sections.items()}
    if seed is not None:
        for name in SEEDED_SECTIONS:
            overrides.setdefault(name, {})["seed"] = seed
    inference = overrides.setdefault("inference", {})
    if context_window is not None:
        inference["context_window_stage1"] = context_window
        inference["context_window_stage2"] = context_window
    if flow_steps is not None:
        inference["flow_steps"] = flow_steps
    if grid is not None:
        inference["grid"] = grid
    return overrides


def load_config(config_path: Optional[Path], overrides: Optional[dict] = None) -> PipelineConfig:
    try:
        return get_settings(config_path, overrides)
    except ConfigError as e:
        console.print(f"[red]Configuration error:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_CONFIG)


def make_progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        TimeRemainingColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )


@contextmanager
def run_session(
    command: str,
    config: PipelineConfig,
    out_dir: Path,
    checkpoint_dir: Path,
    force: bool = False,
    guard_output: bool = True,
    frozen_hash: Optional[str] = None,
) -> Iterator[RunHistory]:
    """Prepare the output directory, logging, config snapshot and history session of one run.

    Library errors become exit codes: configuration errors exit with 2, every
    other failure with 3.
    """
    global _current_history

    try:
        if guard_output:
            out_dir = OutputGuard.prepare(Path(out_dir), force)
        else:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
    except TempomeshError as e:
        console.print(f"[red]Output error:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_RUNTIME)

    configure_run_logging(config.logging, out_dir)
    write_resolved_config(config, out_dir)
    history = RunHistory(Path(checkpoint_dir) / RUNS_FILE_NAME)
    history.start_session(command, out_dir, frozen_hash)
    _current_history = history

    tag = command.upper().replace("-", "_")
    logger.info(f"{tag} [START] | out: {out_dir}")
    start = time.time()
    try:
        yield history
    except typer.Exit as e:
        history.close_session("completed" if e.exit_code == EXIT_OK else "failed")
        raise
    except click.exceptions.ClickException:
        history.close_session("failed")
        raise
    except ConfigError as e:
        logger.error(f"{tag} [FAILED] | config: {e}")
        history.add_event("failure", reason=str(e))
        history.close_session("failed")
        console.print(f"[red]Configuration error:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_CONFIG)
    except (TempomeshError, ValueError, OSError) as e:
        logger.error(f"{tag} [FAILED] | {type(e).__name__}: {e}")
        history.add_event("failure", reason=f"{type(e).__name__}: {e}")
        history.close_session("failed")
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_RUNTIME)
    else:
        history.close_session("completed")
        duration = str(timedelta(seconds=int(time.time() - start)))
        logger.info(f"{tag} [DONE] | duration: {duration}")
    finally:
        _current_history = None


def resolve_conditioning(
    config: PipelineConfig,
    scene_dir: Optional[Path],
    family_kind: Optional[str],
    family_seed: int,
    frames: int,
) -> tuple[CondSignal, np.ndarray, Optional[Scene]]:
    """Conditioning from a generated scene, or from a fresh family of ``family_kind``."""
    if scene_dir is not None:
        scene = Scene.load(scene_dir)
        cond, framesteps = scene_cond(scene, frames)
        return cond, framesteps, scene
    if family_kind is not None:
        if family_kind not in FAMILY_KINDS:
            raise typer.BadParameter(f"unknown family {family_kind!r}, expected one of {', '.join(FAMILY_KINDS)}")
        family = random_family(family_kind, make_rng(family_seed), config.dataset.mesh_detail)
        framesteps = make_framesteps(frames, config.dataset.frame_spacing)
        return CondSignal(cond_descriptor(family, framesteps)), framesteps, None
    raise typer.BadParameter("give a scene with --scene or a family with --family")


def print_report(report: MetricsReport) -> None:
    table = Table(title=f"Scene {report.scene_id} ({report.method})", box=box.SIMPLE)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right", style="green")
    for name in ("cd3d", "cd4d", "cdm", "noise_floor"):
        value = getattr(report, name)
        table.add_row(name, "n/a" if value is None else f"{value:.6g}")
    console.print(table)


def print_result(result: SceneResult, out_dir: Path) -> None:
    timings = ", ".join(f"{k}: {v:.2f}s" for k, v in result.timings.items())
    frames = len(result.extracted) if result.extracted is not None else 0
    console.print(
        Panel(
            f"Frames: [cyan]{frames}[/cyan]\n"
            f"Passes: [cyan]{len(result.chunks)}[/cyan]\n"
            f"Empty frames: [yellow]{sorted(result.failures) or 'none'}[/yellow]\n"
            f"Animated: [green]{result.animated is not None}[/green]\n"
            f"Timings: [magenta]{timings}[/magenta]\n"
            f"Output: [blue]{out_dir}[/blue]",
            title="[bold cyan]Generation[/bold cyan]",
            expand=False,
        )
    )
    if result.report is not None:
        print_report(result.report)


# Data and training


@app.command(name="gen-data", help="Generate a synthetic train or eval split.")
def gen_data(
    out: Path = typer.Option(Path("data/train"), "--out", "-o", help="Output directory of the split"),
    split: str = typer.Option("train", "--split", help="train or eval"),
    count: Optional[int] = typer.Option(None, "--count", help="Number of scenes", show_default=False),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames per scene", show_default=False),
    workers: Optional[int] = typer.Option(None, "--workers", help="Worker processes", show_default=False),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    """Generate procedural animations with material-point consistent clouds.

    Examples:
        Training split with the default settings:
            $ tempomesh gen-data --out data/train

        A longer held-out split for rollouts:
            $ tempomesh gen-data --split eval --frames 48 --out data/eval
    """
    if split not in ("train", "eval"):
        raise typer.BadParameter(f"unknown split {split!r}, expected train or eval")
    count_key = "count" if split == "train" else "eval_count"
    dataset = {count_key: count, "n_frames": frames, "workers": workers}
    config = load_config(config_path, build_overrides(seed, dataset=dataset))
    total = config.dataset.count if split == "train" else config.dataset.eval_count
    with run_session("gen-data", config, out, checkpoint_dir, force) as history:
        with make_progress() as progress:
            task_id = progress.add_task(f"Generating {split} scenes", total=total)
            root = generate_dataset(config.dataset, out, split, force=True, progress=progress, task_id=task_id)
        history.add_event("dataset", split=split, scenes=total, root=str(root))
        console.print(f"[green]Wrote {total} {split} scenes to {root}[/green]")


def _train(command: str, trainer, data: Path, out: Optional[Path], checkpoint_dir: Path, config: PipelineConfig):
    frozen = None if command == "train-vae" else frozen_vae_hash(checkpoint_dir)
    target = out or checkpoint_dir
    with run_session(command, config, target, checkpoint_dir, guard_output=False, frozen_hash=frozen) as history:
        dataset = load_dataset(data)
        with make_progress() as progress:
            trainer(config, dataset, checkpoint_dir, history, progress)
        console.print(f"[green]{command}: checkpoint written to {checkpoint_dir}[/green]")


@app.command(name="train-vae", help="Train the shape autoencoder.")
def train_vae_command(
    data: Path = typer.Option(Path("data/train"), "--data", "-d", help="Training split"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory (defaults to --checkpoint-dir)"),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path, build_overrides(seed))
    _train("train-vae", train_vae_stage, data, out, checkpoint_dir, config)


@app.command(name="train-diffusion", help="Train the temporal diffusion model on frozen latents.")
def train_diffusion_command(
    data: Path = typer.Option(Path("data/train"), "--data", "-d", help="Training split"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory (defaults to --checkpoint-dir)"),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames per training window", show_default=False),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path, build_overrides(seed, diffusion={"n_frames": frames}))
    _train("train-diffusion", train_diffusion_stage, data, out, checkpoint_dir, config)


@app.command(name="train-tae", help="Train the temporal deformation autoencoder on frozen latents.")
def train_tae_command(
    data: Path = typer.Option(Path("data/train"), "--data", "-d", help="Training split"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory (defaults to --checkpoint-dir)"),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames per training window", show_default=False),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path, build_overrides(seed, tae={"n_frames": frames}))
    _train("train-tae", train_tae_stage, data, out, checkpoint_dir, config)


# Generation


def _generate(
    command: str,
    scene_dir: Optional[Path],
    family_kind: Optional[str],
    family_seed: int,
    frames: Optional[int],
    source_frame: Optional[int],
    source_mesh: Optional[Path],
    out: Path,
    render: bool,
    force: bool,
    checkpoint_dir: Path,
    config: PipelineConfig,
) -> None:
    with run_session(command, config, out, checkpoint_dir, force) as history:
        models = Models.load(checkpoint_dir)
        window = models.diffusion.config.n_frames
        n = frames or window
        if command == "infer" and n > window:
            raise typer.BadParameter(f"the model generates {window} frames at once, use rollout for {n}")
        cond, framesteps, scene = resolve_conditioning(config, scene_dir, family_kind, family_seed, n)

        sources = {}
        if source_mesh is not None:
            sources[source_frame or 0] = read_obj(source_mesh)
        elif source_frame is not None:
            if scene is None:
                raise typer.BadParameter("--source-frame needs --scene")
            sources[source_frame] = scene.ground_truth.frame(source_frame)

        if command == "rollout":
            result = autoregressive_rollout(cond, config, models, sources or None, framesteps)
        else:
            result = infer_sequence_to_4d(cond, sources or None, config, models, framesteps)

        if scene is not None and result.animated is not None and n <= len(scene):
            gt = scene.ground_truth
            gt = AnimatedMesh(gt.faces, gt.framesteps[:n], gt.vertices[:n])
            result.report = score_scene(scene.scene_id, "full", gt, result.animated, config.eval, result.timings)
            history.add_event("metrics", scene=scene.scene_id, cd3d=result.report.cd3d,
                              cd4d=result.report.cd4d, cdm=result.report.cdm)
        export_scene(result, out, render=render, force=True)
        print_result(result, out)
        if result.animated is None:
            history.add_event("failure", reason="no animated mesh", empty_frames=sorted(result.failures))
            raise typer.Exit(EXIT_RUNTIME)


@app.command(help="Generate one window of frames and animate its reference mesh.")
def infer(
    scene: Optional[Path] = typer.Option(None, "--scene", help="Scene directory to take the conditioning from"),
    family: Optional[str] = typer.Option(None, "--family", help=f"Family kind: {', '.join(FAMILY_KINDS)}"),
    family_seed: int = typer.Option(0, "--family-seed", help="Seed of the family parameters"),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames to generate", show_default=False),
    source_frame: Optional[int] = typer.Option(None, "--source-frame", help="Pin this ground-truth frame"),
    source_mesh: Optional[Path] = typer.Option(None, "--source-mesh", help="OBJ pinned at --source-frame (default 0)"),
    out: Path = typer.Option(Path("runs/infer"), "--out", "-o", help="Output directory"),
    render: bool = typer.Option(False, "--render", help="Also write PNG renders"),
    flow_steps: Optional[int] = typer.Option(None, "--flow-steps", help="Euler steps", show_default=False),
    grid: Optional[int] = typer.Option(None, "--grid", help="Extraction grid resolution", show_default=False),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    """Two-stage generation of a shared-topology animation.

    Examples:
        From a held-out scene, pinned to its first frame:
            $ tempomesh infer --scene data/eval/scenes/<id> --source-frame 0

        From a new bending bar:
            $ tempomesh infer --family bending-bar --family-seed 7 --render
    """
    config = load_config(config_path, build_overrides(seed, flow_steps=flow_steps, grid=grid))
    _generate("infer", scene, family, family_seed, frames, source_frame, source_mesh, out, render, force,
              checkpoint_dir, config)


@app.command(help="Generate a long animation in overlapping windows.")
def rollout(
    scene: Optional[Path] = typer.Option(None, "--scene", help="Scene directory to take the conditioning from"),
    family: Optional[str] = typer.Option(None, "--family", help=f"Family kind: {', '.join(FAMILY_KINDS)}"),
    family_seed: int = typer.Option(0, "--family-seed", help="Seed of the family parameters"),
    frames: int = typer.Option(48, "--frames", help="Total frames to generate"),
    context_window: Optional[int] = typer.Option(
        None, "--context-window", help="Frames carried between windows (both stages)", show_default=False
    ),
    source_frame: Optional[int] = typer.Option(None, "--source-frame", help="Pin this ground-truth frame"),
    source_mesh: Optional[Path] = typer.Option(None, "--source-mesh", help="OBJ pinned at --source-frame (default 0)"),
    out: Path = typer.Option(Path("runs/rollout"), "--out", "-o", help="Output directory"),
    render: bool = typer.Option(False, "--render", help="Also write PNG renders"),
    flow_steps: Optional[int] = typer.Option(None, "--flow-steps", help="Euler steps", show_default=False),
    grid: Optional[int] = typer.Option(None, "--grid", help="Extraction grid resolution", show_default=False),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(
        config_path, build_overrides(seed, context_window=context_window, flow_steps=flow_steps, grid=grid)
    )
    _generate("rollout", scene, family, family_seed, frames, source_frame, source_mesh, out, render, force,
              checkpoint_dir, config)


@app.command(help="Drive a given mesh with the motion generated for another conditioning.")
def transfer(
    source_cond: Path = typer.Option(..., "--source-cond", help="cond.json of a scene, or the scene directory"),
    reference_mesh: Path = typer.Option(..., "--reference-mesh", help="OBJ mesh to animate"),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames to generate", show_default=False),
    out: Path = typer.Option(Path("runs/transfer"), "--out", "-o", help="Output directory"),
    render: bool = typer.Option(False, "--render", help="Also write PNG renders"),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path, build_overrides(seed))
    with run_session("transfer", config, out, checkpoint_dir, force):
        models = Models.load(checkpoint_dir)
        descriptor_path = source_cond / "cond.json" if source_cond.is_dir() else source_cond
        descriptor = read_descriptor(descriptor_path)
        n = min(frames or models.diffusion.config.n_frames, len(descriptor["cond"]))
        cond = CondSignal(np.asarray(descriptor["cond"])[:n])
        framesteps = np.asarray(descriptor["framesteps"], dtype=np.float64)[:n]
        result = transfer_motion(cond, read_obj(reference_mesh), config, models, framesteps)
        export_scene(result, out, render=render, force=True)
        print_result(result, out)


# Evaluation


@app.command(name="eval", help="Score the method and the baselines on a held-out split.")
def eval_command(
    data: Path = typer.Option(Path("data/eval"), "--data", "-d", help="Held-out split"),
    train_data: Optional[Path] = typer.Option(None, "--train-data", help="Training split to check disjointness"),
    limit: Optional[int] = typer.Option(None, "--limit", help="Evaluate only the first scenes", show_default=False),
    baselines: Optional[bool] = typer.Option(None, "--baselines/--no-baselines", help="Also score the baselines"),
    watertight: Optional[bool] = typer.Option(
        None, "--watertight/--no-watertight", help="Remesh the ground truth watertight for CD-3D and CD-4D"
    ),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames scored per scene", show_default=False),
    context_window: Optional[int] = typer.Option(None, "--context-window", help="Rollout context", show_default=False),
    flow_steps: Optional[int] = typer.Option(None, "--flow-steps", help="Euler steps", show_default=False),
    grid: Optional[int] = typer.Option(None, "--grid", help="Extraction grid resolution", show_default=False),
    out: Path = typer.Option(Path("runs/eval"), "--out", "-o", help="Output directory"),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    """Evaluate every held-out scene; failing scenes are listed and exit with code 3."""
    evaluation = {"baselines": baselines, "watertight": watertight, "eval_frames": frames}
    config = load_config(
        config_path,
        build_overrides(seed, context_window=context_window, flow_steps=flow_steps, grid=grid, eval=evaluation),
    )
    with run_session("eval", config, out, checkpoint_dir, force) as history:
        models = Models.load(checkpoint_dir)
        held_out = load_dataset(data, limit)
        if train_data is not None:
            assert_disjoint(load_dataset(train_data), held_out)
        with make_progress() as progress:
            result = evaluate(held_out, models, config, out, history, progress)

        table = Table(title="Evaluation", box=box.SIMPLE)
        for column in ("Method", "Scenes", "CD-3D", "CD-4D", "CD-M", "Failed"):
            table.add_column(column, justify="left" if column == "Method" else "right")
        for method, agg in result.aggregates.items():
            table.add_row(
                method,
                str(agg.n_scenes),
                *("n/a" if v is None else f"{v:.6g}" for v in (agg.cd3d, agg.cd4d, agg.cdm)),
                str(len(agg.failed)),
            )
        console.print(table)
        if result.failed:
            for scene_id, reason in sorted(result.failures["full"].items()):
                console.print(f"[red]{scene_id}[/red]: {escape(reason)}")
            raise typer.Exit(EXIT_RUNTIME)


@app.command(help="Train and score every variant of one ablation axis.")
def ablate(
    axis: str = typer.Option(..., "--axis", help=f"One of {', '.join(ABLATION_AXES)}"),
    train_data: Path = typer.Option(Path("data/train"), "--train-data", help="Training split"),
    eval_data: Path = typer.Option(Path("data/eval"), "--eval-data", help="Held-out split"),
    base_checkpoints: Optional[Path] = typer.Option(
        None, "--base-checkpoints", help="Checkpoints reused by variants that do not retrain a phase"
    ),
    out: Path = typer.Option(Path("runs/ablation"), "--out", "-o", help="Output directory"),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path, build_overrides(seed))
    with run_session("ablate", config, out, checkpoint_dir, force) as history:
        with make_progress() as progress:
            result = run_ablation(axis, config, train_data, eval_data, out, base_checkpoints, history, progress)
        table = Table(title=f"Ablation: {axis}", box=box.SIMPLE)
        for column in ("Variant", "CD-3D", "CD-4D", "CD-M", "Failed", "Notes"):
            table.add_column(column)
        for row in result.rows:
            agg = row.aggregate
            table.add_row(
                row.label,
                *("n/a" if v is None else f"{v:.6g}" for v in (agg.cd3d, agg.cd4d, agg.cdm)),
                str(len(agg.failed)),
                ", ".join(f"{k}={v}" for k, v in sorted(row.notes.items())),
            )
        console.print(table)


@app.command(help="Re-export a written animation, optionally with renders.")
def export(
    animation: Path = typer.Option(..., "--animation", help="Animation manifest to export"),
    out: Path = typer.Option(Path("runs/export"), "--out", "-o", help="Output directory"),
    render: bool = typer.Option(True, "--render/--no-render", help="Write PNG renders"),
    config_path: Optional[Path] = ConfigOption,
    force: bool = ForceOption,
    checkpoint_dir: Path = CheckpointDirOption,
):
    config = load_config(config_path)
    with run_session("export", config, out, checkpoint_dir, force):
        anim = read_animation(animation)
        report_path = animation.parent.parent / "metrics.txt"
        report = MetricsReport.from_text(report_path.read_text(encoding="utf-8")) if report_path.exists() else None
        result = SceneResult(
            latents=None,
            extracted=anim if isinstance(anim, MeshSequence) else None,
            animated=anim if isinstance(anim, AnimatedMesh) else None,
            report=report,
        )
        written = export_scene(result, out, render=render, force=True)
        console.print(f"[green]Exported {len(written)} items to {out}[/green]")


# History


@app.command(help="Show the run history (use 'tempomesh history --help' for details).")
def history(
    checkpoint_dir: Path = CheckpointDirOption,
    limit: int = typer.Option(10, "--limit", "-l", help="Number of sessions to show"),
    session_id: Optional[int] = typer.Option(None, "--session", "-s", help="Show the events of one session"),
    last_session: bool = typer.Option(False, "--last-session", help="Show the events of the last session"),
    clear_history: bool = typer.Option(False, "--clear-history", help="Clear the entire run history"),
):
    """Show the sessions recorded in ``runs.json``.

    Examples:
        All sessions (latest first):
            $ tempomesh history

        Events of one session:
            $ tempomesh history --session 3
    """
    runs = RunHistory(Path(checkpoint_dir) / RUNS_FILE_NAME)

    if clear_history:
        if typer.confirm("Are you sure you want to clear the entire history?"):
            runs.clear_history()
            console.print("[green]History cleared successfully.[/green]")
        else:
            console.print("[yellow]History clear operation cancelled.[/yellow]")
        return

    if last_session:
        last = runs.get_last_session()
        if last is None:
            console.print("[yellow]No sessions in history to show the last one.[/yellow]")
            return
        session_id = last["id"]

    if not runs.sessions:
        console.print("[yellow]No sessions in history[/yellow]")
        return

    if session_id is not None:
        session = runs.get_session(session_id)
        if session is None:
            console.print(f"[red]Session {session_id} not found[/red]")
            raise typer.Exit(EXIT_USAGE)
        console.print(
            f"\n[bold]Session Details[/bold]\n"
            f"Command: [cyan]{session.get('command', 'unknown')}[/cyan]\n"
            f"Started: [magenta]{session.get('start_time', 'unknown')}[/magenta]\n"
            f"Output: [blue]{session.get('out_dir') or 'N/A'}[/blue]\n"
            f"Status: [yellow]{session.get('status', 'unknown')}[/yellow]"
        )
        events = session.get("events", [])
        if not events:
            console.print(f"[yellow]No events in session {session_id}[/yellow]")
            return
        table = Table(title=f"Session {session_id} Events")
        table.add_column("#", justify="right", style="cyan")
        table.add_column("Time", style="magenta")
        table.add_column("Type", style="green")
        table.add_column("Details", style="blue")
        for i, event in enumerate(events, 1):
            try:
                time_str = datetime.fromisoformat(event.get("timestamp", "")).strftime("%H:%M:%S")
            except (ValueError, TypeError):
                time_str = "unknown"
            details = ", ".join(f"{k}={v}" for k, v in event.items() if k not in ("type", "timestamp"))
            table.add_row(str(i), time_str, event.get("type", "unknown"), details)
        console.print(table)
        return

    sessions = runs.sessions[-limit:] if limit > 0 else runs.sessions
    table = Table(title="Run Sessions")
    table.add_column("Session ID", justify="right", style="cyan")
    table.add_column("Date", style="magenta")
    table.add_column("Time", style="magenta")
    table.add_column("Command", style="green")
    table.add_column("Output", style="blue")
    table.add_column("Events", justify="right", style="cyan")
    table.add_column("Status", style="yellow")
    for session in reversed(sessions):
        start_time = datetime.fromisoformat(session["start_time"])
        out_dir = session.get("out_dir") or "N/A"
        if len(out_dir) > 30:
            out_dir = "..." + out_dir[-27:]
        table.add_row(
            str(session["id"]),
            start_time.strftime("%Y-%m-%d"),
            start_time.strftime("%H:%M:%S"),
            session.get("command", "unknown"),
            out_dir,
            str(len(session.get("events", []))),
            session["status"],
        )
    console.print(table)
    console.print("\n[dim]Use --session/-s <ID> to view the events of a session[/dim]")


def main() -> None:
    """Console entry point; maps usage errors to exit code 1."""
    try:
        code = app(standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.ClickException as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.Abort:
        console.print("[yellow]Aborted[/yellow]")
        sys.exit(EXIT_USAGE)
    sys.exit(code if isinstance(code, int) else EXIT_OK)


if __name__ == "__main__":
    main()
