"""End-to-end orchestration: training phases, two-stage inference, rollout, evaluation and export."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from loguru import logger

from tempomesh.checkpoint import load_checkpoint, param_hash
from tempomesh.config import PipelineConfig, build_config
from tempomesh.dataset import Dataset, Scene, dataset_hash, load_dataset
from tempomesh.errors import (
    CapabilityError,
    CheckpointError,
    ConfigError,
    FrozenParamsError,
    GeometryError,
)
from tempomesh.families import COND_DIM, cond_descriptor, make_framesteps
from tempomesh.formats import write_animation
from tempomesh.geometry import AnimatedMesh, MeshSequence, TriMesh, cube_normalization, make_watertight, sample_surface
from tempomesh.history import RunHistory
from tempomesh.metrics import AggregateReport, MetricsReport, aggregate_reports, score_scene
from tempomesh.security import OutputGuard
from tempomesh.tae import TaeSample, TemporalAutoencoder, animate, encode_sequence, train_tae
from tempomesh.tdiff import CondSignal, DiffusionSample, LatentSequence, TemporalDenoiser, flow_sample, train_diffusion
from tempomesh.training import FrozenGuard, ProgressBarProtocol
from tempomesh.vae3d import ShapeAutoencoder, ShapeSample, train_vae

CHECKPOINT_NAMES = {"vae": "vae.ckpt", "diffusion": "diffusion.ckpt", "tae": "tae.ckpt"}
ABLATION_AXES = ("rotary", "masking", "normals", "n_frames", "context_window", "time_injection")
BASELINES = ("per-frame", "zero-deformation", "stage2-only")


def checkpoint_path(checkpoint_dir: Path, phase: str) -> Path:
    return Path(checkpoint_dir) / CHECKPOINT_NAMES[phase]


@contextmanager
def _timed(timings: dict[str, float], stage: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


def _add_task(progress: Optional[ProgressBarProtocol], description: str, total: int) -> Optional[int]:
    return progress.add_task(description, total=total) if progress is not None else None


# Models


@dataclass
class Models:
    """The three trained networks used at inference."""

    vae: ShapeAutoencoder
    diffusion: TemporalDenoiser
    tae: TemporalAutoencoder

    @property
    def vae_hash(self) -> str:
        return param_hash(self.vae.state_dict())

    @classmethod
    def load(cls, checkpoint_dir: Path) -> "Models":
        """Load ``vae.ckpt``, ``diffusion.ckpt`` and ``tae.ckpt``.

        Raises:
            CheckpointError: If a checkpoint is missing or unreadable.
            FrozenParamsError: If a later stage was trained against another autoencoder.
        """
        paths = {phase: checkpoint_path(checkpoint_dir, phase) for phase in CHECKPOINT_NAMES}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise CheckpointError(f"missing checkpoints: {', '.join(missing)}")
        models = cls(
            ShapeAutoencoder.from_checkpoint(paths["vae"]),
            TemporalDenoiser.from_checkpoint(paths["diffusion"]),
            TemporalAutoencoder.from_checkpoint(paths["tae"]),
        )
        current = models.vae_hash
        for phase in ("diffusion", "tae"):
            expected = load_checkpoint(paths[phase]).metadata.get("vae_hash")
            if expected is not None and expected != current:
                raise FrozenParamsError(
                    f"{phase} checkpoint was trained against another shape autoencoder "
                    f"({expected[:12]} vs {current[:12]})"
                )
        return models


# Training phases


def vae_samples(dataset: Dataset) -> list[ShapeSample]:
    """Every frame of every scene, labelled by its family's analytic occupancy."""
    return [
        ShapeSample(cloud, scene.family, float(t))
        for scene in dataset
        for cloud, t in zip(scene.frames, scene.framesteps)
    ]


def encode_scenes(dataset: Dataset, vae: ShapeAutoencoder, workers: int = 1) -> list[np.ndarray]:
    """Frame latents ``(N, T, D)`` of every scene."""
    return [encode_sequence(scene.frames, vae, scene.framesteps, workers).tokens for scene in dataset]


def train_vae_stage(
    config: PipelineConfig,
    dataset: Dataset,
    checkpoint_dir: Path,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
) -> ShapeAutoencoder:
    task_id = _add_task(progress, "Training shape autoencoder", config.vae.steps)
    model, _ = train_vae(
        vae_samples(dataset),
        config.vae,
        checkpoint_path=checkpoint_path(checkpoint_dir, "vae"),
        history=history,
        progress=progress,
        task_id=task_id,
    )
    return model


def _frozen_vae(checkpoint_dir: Path) -> tuple[ShapeAutoencoder, FrozenGuard]:
    path = checkpoint_path(checkpoint_dir, "vae")
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path} (run train-vae first)")
    vae = ShapeAutoencoder.from_checkpoint(path)
    return vae, FrozenGuard.pin(vae)


def frozen_vae_hash(checkpoint_dir: Path) -> Optional[str]:
    """Hash of the stored autoencoder, or None when it was not trained yet."""
    path = checkpoint_path(checkpoint_dir, "vae")
    return param_hash(load_checkpoint(path).params) if path.exists() else None


def train_diffusion_stage(
    config: PipelineConfig,
    dataset: Dataset,
    checkpoint_dir: Path,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
) -> TemporalDenoiser:
    """Train Stage I on latents of the frozen autoencoder."""
    vae, frozen = _frozen_vae(checkpoint_dir)
    latents = encode_scenes(dataset, vae, config.dataset.workers)
    samples = [DiffusionSample(z, scene.cond) for z, scene in zip(latents, dataset)]
    task_id = _add_task(progress, "Training temporal diffusion", config.diffusion.steps)
    model, _ = train_diffusion(
        samples,
        config.diffusion,
        COND_DIM,
        frozen=frozen,
        checkpoint_path=checkpoint_path(checkpoint_dir, "diffusion"),
        history=history,
        progress=progress,
        task_id=task_id,
    )
    return model


def train_tae_stage(
    config: PipelineConfig,
    dataset: Dataset,
    checkpoint_dir: Path,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
) -> TemporalAutoencoder:
    """Train Stage II on latents of the frozen autoencoder and the analytic motions."""
    vae, frozen = _frozen_vae(checkpoint_dir)
    latents = encode_scenes(dataset, vae, config.dataset.workers)
    samples = [TaeSample(scene.family, z, scene.framesteps) for z, scene in zip(latents, dataset)]
    task_id = _add_task(progress, "Training temporal autoencoder", config.tae.steps)
    model, _ = train_tae(
        samples,
        config.tae,
        vae.config.latent_dim,
        frozen=frozen,
        checkpoint_path=checkpoint_path(checkpoint_dir, "tae"),
        history=history,
        progress=progress,
        task_id=task_id,
    )
    return model


# Inference


@dataclass
class SceneResult:
    """Outputs of one generated sequence.

    Attributes:
        latents: Stage I latents of every frame.
        extracted: Per-frame meshes with independent topology.
        animated: The shared-topology animation, when Stage II could run.
        report: Metrics, once scored.
        timings: Wall-clock seconds per stage.
        failures: Frames whose extraction came out empty, with the reason.
        chunks: ``(start, stop)`` frame ranges of the Stage I passes.
    """

    latents: Optional[LatentSequence]
    extracted: Optional[MeshSequence]
    animated: Optional[AnimatedMesh]
    report: Optional[MetricsReport] = None
    timings: dict[str, float] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)
    chunks: list[tuple[int, int]] = field(default_factory=list)


def _default_framesteps(config: PipelineConfig, n_frames: int) -> np.ndarray:
    return make_framesteps(n_frames, config.dataset.frame_spacing)


def encode_mesh(mesh: TriMesh, vae: ShapeAutoencoder, n_points: int, seed: int) -> np.ndarray:
    """Latent tokens of a mesh through its surface samples."""
    return vae.encode(sample_surface(mesh, n_points, seed)).tokens


def _stage1(
    cond: CondSignal,
    sources: Mapping[int, np.ndarray],
    framesteps: np.ndarray,
    config: PipelineConfig,
    models: Models,
    seed: int,
    frame_offset: int,
    timings: dict[str, float],
) -> tuple[LatentSequence, list[TriMesh], dict[int, str]]:
    with _timed(timings, "stage1_sampling"):
        latents = flow_sample(
            cond,
            sources,
            config.inference.flow_steps,
            seed,
            models.diffusion,
            framesteps=framesteps,
            frame_offset=frame_offset,
        )
    meshes, failures = [], {}
    with _timed(timings, "extraction"):
        for k in range(len(latents)):
            mesh = models.vae.extract_mesh(latents.tokens[k], config.inference.grid)
            if mesh.is_empty:
                failures[k] = "empty extraction"
                logger.warning(f"INFER [EMPTY] | frame: {k + frame_offset} | flags: {mesh.flags}")
            meshes.append(mesh)
    return latents, meshes, failures


def _stage2_latents(
    tokens: np.ndarray,
    meshes: Sequence[TriMesh],
    framesteps: np.ndarray,
    config: PipelineConfig,
    models: Models,
) -> LatentSequence:
    """Stage II input: latents re-encoded from the extracted meshes, or the Stage I latents."""
    if config.inference.stage2_input == "latents":
        return LatentSequence.clean(tokens, framesteps)
    encoded = []
    for k, mesh in enumerate(meshes):
        if mesh.is_empty:
            encoded.append(np.asarray(tokens[k], dtype=np.float32))
        else:
            encoded.append(encode_mesh(mesh, models.vae, config.inference.n_points, config.inference.seed + k))
    return LatentSequence.clean(np.stack(encoded), framesteps)


def _pick_reference(meshes: Sequence[TriMesh], preferred: int) -> Optional[int]:
    if not meshes[preferred].is_empty:
        return preferred
    for k, mesh in enumerate(meshes):
        if not mesh.is_empty:
            logger.warning(f"INFER [REFERENCE] | frame {preferred} is empty, using frame {k}")
            return k
    return None


def infer_sequence_to_4d(
    cond: CondSignal,
    source_meshes: Optional[Mapping[int, TriMesh]],
    config: PipelineConfig,
    models: Models,
    framesteps: Optional[Sequence[float]] = None,
    reference_mesh: Optional[TriMesh] = None,
    source_latents: Optional[Mapping[int, np.ndarray]] = None,
    frame_offset: int = 0,
    seed: Optional[int] = None,
) -> SceneResult:
    """Generate an animated mesh for ``cond`` in two stages.

    Stage I samples the frame latents, with any source meshes encoded and pinned,
    and extracts one mesh per frame. Stage II re-encodes the extracted meshes and
    moves the reference frame's vertices to every framestep.

    Args:
        cond: Conditioning of the ``N`` frames.
        source_meshes: Known meshes keyed by frame index.
        config: Resolved configuration.
        models: Trained networks.
        framesteps: Frame times; evenly spaced by ``dataset.frame_spacing`` when None.
        reference_mesh: Mesh to animate instead of the extracted reference frame.
        source_latents: Clean latents keyed by frame index, pinned like sources.
        frame_offset: Rotary index of the first frame.
        seed: Noise seed; ``inference.seed`` when None.

    Raises:
        CapabilityError: If sources are given to a denoiser trained without them.
    """
    n = len(cond)
    framesteps = _default_framesteps(config, n) if framesteps is None else np.asarray(framesteps, dtype=np.float64)
    seed = config.inference.seed if seed is None else seed
    timings: dict[str, float] = {}

    sources: dict[int, np.ndarray] = dict(source_latents or {})
    if source_meshes:
        if not models.diffusion.supports_sources:
            raise CapabilityError("this denoiser was trained without source frames and cannot condition on 3D inputs")
        with _timed(timings, "source_encoding"):
            for k, mesh in source_meshes.items():
                sources[int(k)] = encode_mesh(mesh, models.vae, config.inference.n_points, seed + int(k))

    latents, meshes, failures = _stage1(cond, sources, framesteps, config, models, seed, frame_offset, timings)
    extracted = MeshSequence(framesteps, meshes)
    result = SceneResult(latents, extracted, None, timings=timings, failures=failures, chunks=[(0, n)])

    preferred = min(config.inference.reference_frame, n - 1)
    ref = _pick_reference(meshes, preferred)
    if reference_mesh is None and ref is None:
        logger.error("INFER [FAILED] | every extracted frame is empty, Stage II skipped")
        return result
    ref = preferred if ref is None else ref
    reference = reference_mesh if reference_mesh is not None else meshes[ref]
    with _timed(timings, "stage2"):
        Z = _stage2_latents(latents.tokens, meshes, framesteps, config, models)
        result.animated = animate(reference, float(framesteps[ref]), Z, framesteps, models.tae)
    logger.info(
        f"INFER [DONE] | frames: {n} | sources: {sorted(sources)} | empty: {sorted(failures)} | "
        f"seconds: {sum(timings.values()):.2f}"
    )
    return result


def rollout_chunks(total: int, n_frames: int, context_window: int) -> list[tuple[int, int]]:
    """Frame ranges of the Stage I passes over ``total`` frames.

    Each pass after the first starts ``context_window`` frames before the end of
    the previous one, pulled back so it never runs past ``total``.

    Raises:
        ConfigError: If ``context_window`` is not in ``[1, n_frames)``.
    """
    if not 1 <= context_window < n_frames:
        raise ConfigError(f"context window must satisfy 1 <= c_w < {n_frames}, got {context_window}")
    if total <= n_frames:
        return [(0, total)]
    chunks = [(0, n_frames)]
    while chunks[-1][1] < total:
        prev_end = chunks[-1][1]
        start = min(prev_end - context_window, total - n_frames)
        chunks.append((start, start + n_frames))
    return chunks


def autoregressive_rollout(
    cond: CondSignal,
    config: PipelineConfig,
    models: Models,
    source_meshes: Optional[Mapping[int, TriMesh]] = None,
    framesteps: Optional[Sequence[float]] = None,
) -> SceneResult:
    """Generate ``M`` frames in overlapping passes of ``diffusion.n_frames`` frames.

    Every pass after the first pins the overlap with the previous pass as sources:
    by default their latents are handed over as they are (``rollout_handoff =
    "latent"``), otherwise they are re-encoded from the extracted meshes. Stage II
    then animates the first pass from the reference frame and every later pass from
    the last animated frame, over a window that reaches ``context_window_stage2``
    frames back.

    Raises:
        ConfigError: If a context window is not smaller than ``diffusion.n_frames``.
    """
    inference = config.inference
    n = models.diffusion.config.n_frames
    total = len(cond)
    framesteps = _default_framesteps(config, total) if framesteps is None else np.asarray(framesteps, dtype=np.float64)
    chunks = rollout_chunks(total, n, inference.context_window_stage1)
    if not 1 <= inference.context_window_stage2 < n:
        raise ConfigError(f"context window must satisfy 1 <= c_w < {n}, got {inference.context_window_stage2}")
    if len(chunks) == 1:
        return infer_sequence_to_4d(cond, source_meshes, config, models, framesteps)

    timings: dict[str, float] = {}
    tokens = np.zeros((total, models.vae.config.latent_tokens, models.vae.config.latent_dim), dtype=np.float32)
    meshes: list[Optional[TriMesh]] = [None] * total
    failures: dict[int, str] = {}
    sources: dict[int, np.ndarray] = {}
    if source_meshes:
        if not models.diffusion.supports_sources:
            raise CapabilityError("this denoiser was trained without source frames and cannot condition on 3D inputs")
        with _timed(timings, "source_encoding"):
            for k, mesh in source_meshes.items():
                sources[int(k)] = encode_mesh(mesh, models.vae, inference.n_points, inference.seed + int(k))

    prev_end = 0
    for index, (start, stop) in enumerate(chunks):
        pinned = {k - start: v for k, v in sources.items() if start <= k < stop}
        for k in range(start, prev_end):
            if inference.rollout_handoff == "latent" or meshes[k] is None or meshes[k].is_empty:
                pinned[k - start] = tokens[k]
            else:
                pinned[k - start] = encode_mesh(meshes[k], models.vae, inference.n_points, inference.seed + k)
        latents, chunk_meshes, chunk_failures = _stage1(
            cond.window(start, stop),
            pinned,
            framesteps[start:stop],
            config,
            models,
            inference.seed + index,
            start,
            timings,
        )
        for k in range(start, stop):
            if k >= prev_end:
                tokens[k] = latents.tokens[k - start]
                meshes[k] = chunk_meshes[k - start]
                if (k - start) in chunk_failures:
                    failures[k] = chunk_failures[k - start]
        logger.info(f"ROLLOUT [CHUNK] | pass: {index + 1}/{len(chunks)} | frames: [{start}, {stop}) | pinned: {len(pinned)}")
        prev_end = stop

    latents = LatentSequence(tokens, np.zeros(total), np.zeros(total, dtype=bool), framesteps)
    extracted = MeshSequence(framesteps, meshes)
    result = SceneResult(latents, extracted, None, timings=timings, failures=failures, chunks=chunks)

    first_stop = chunks[0][1]
    ref = _pick_reference(meshes[:first_stop], inference.reference_frame)
    if ref is None:
        logger.error("ROLLOUT [FAILED] | the first pass extracted no mesh, Stage II skipped")
        return result
    with _timed(timings, "stage2"):
        Z = _stage2_latents(tokens[:first_stop], meshes[:first_stop], framesteps[:first_stop], config, models)
        first = animate(meshes[ref], float(framesteps[ref]), Z, framesteps[:first_stop], models.tae)
        vertices = [first.vertices]
        faces = first.faces
        done = first_stop
        for start, stop in chunks[1:]:
            lo = done - inference.context_window_stage2
            Z = _stage2_latents(tokens[lo:stop], meshes[lo:stop], framesteps[lo:stop], config, models)
            reference = TriMesh(vertices[-1][-1], faces)
            moved = animate(reference, float(framesteps[done - 1]), Z, framesteps[done:stop], models.tae)
            vertices.append(moved.vertices)
            done = stop
        result.animated = AnimatedMesh(faces, framesteps, np.concatenate(vertices))
    logger.info(f"ROLLOUT [DONE] | frames: {total} | passes: {len(chunks)} | empty: {sorted(failures)}")
    return result


def transfer(
    source_cond: CondSignal,
    reference_mesh: TriMesh,
    config: PipelineConfig,
    models: Models,
    framesteps: Optional[Sequence[float]] = None,
) -> SceneResult:
    """Drive ``reference_mesh`` with the motion generated for ``source_cond``.

    The mesh is fitted into the [-1, 1] cube the models were trained in, animated
    there, and the animation is mapped back to the mesh's own coordinates.
    """
    if reference_mesh.is_empty:
        raise GeometryError("cannot transfer motion onto an empty mesh")
    center, scale = cube_normalization(MeshSequence([0.0], [reference_mesh]))
    fitted = reference_mesh.with_vertices((reference_mesh.vertices - center) * scale)
    result = infer_sequence_to_4d(source_cond, None, config, models, framesteps, reference_mesh=fitted)
    if result.animated is not None:
        anim = result.animated
        result.animated = AnimatedMesh(anim.faces, anim.framesteps, anim.vertices / scale + center)
    return result


# Evaluation


@dataclass
class EvaluationResult:
    reports: dict[str, list[MetricsReport]]
    aggregates: dict[str, AggregateReport]
    failures: dict[str, dict[str, str]]

    @property
    def failed(self) -> bool:
        return any(self.failures.values())


def _truncate(anim: AnimatedMesh, n: int) -> AnimatedMesh:
    return AnimatedMesh(anim.faces, anim.framesteps[:n], anim.vertices[:n])


def scene_cond(scene: Scene, n_frames: int) -> tuple[CondSignal, np.ndarray]:
    """Conditioning and framesteps of the first ``n_frames`` frames, extended analytically past the scene."""
    framesteps = make_framesteps(n_frames, float(scene.framesteps[1] - scene.framesteps[0]))
    if n_frames <= len(scene):
        return CondSignal(scene.cond[:n_frames]), scene.framesteps[:n_frames]
    return CondSignal(cond_descriptor(scene.family, framesteps)), framesteps


def per_frame_baseline(
    cond: CondSignal,
    framesteps: np.ndarray,
    config: PipelineConfig,
    models: Models,
    reference_latent: Optional[np.ndarray] = None,
) -> MeshSequence:
    """Every frame sampled alone, without temporal attention across frames."""
    meshes = []
    for k in range(len(cond)):
        sources = {0: reference_latent} if reference_latent is not None and k == config.inference.reference_frame else None
        latents = flow_sample(
            cond.window(k, k + 1), sources, config.inference.flow_steps, config.inference.seed + k, models.diffusion
        )
        meshes.append(models.vae.extract_mesh(latents.tokens[0], config.inference.grid))
    return MeshSequence(framesteps, meshes)


def zero_deformation_baseline(reference: TriMesh, framesteps: np.ndarray) -> AnimatedMesh:
    """The reference mesh held still at every framestep."""
    return AnimatedMesh(reference.faces, framesteps, np.repeat(reference.vertices[None], len(framesteps), axis=0))


def stage2_only(scene: Scene, n_frames: int, config: PipelineConfig, models: Models) -> AnimatedMesh:
    """Stage II on latents of the ground-truth clouds, animating the ground-truth reference mesh."""
    gt = scene.ground_truth
    ref = config.inference.reference_frame
    Z = encode_sequence(scene.frames[:n_frames], models.vae, scene.framesteps[:n_frames])
    return animate(gt.frame(ref), float(scene.framesteps[ref]), Z, scene.framesteps[:n_frames], models.tae)


def evaluate_scene(
    scene: Scene, config: PipelineConfig, models: Models
) -> tuple[dict[str, MetricsReport], dict[str, str]]:
    """Score the full method and, when enabled, the baselines on one scene.

    Returns the reports by method and the failure reason of every baseline that
    could not be scored. A failing baseline never discards the other reports.

    Raises:
        GeometryError: If the full method produced no animated mesh.
    """
    ev = config.eval
    n = min(ev.eval_frames, len(scene))
    gt = _truncate(scene.ground_truth, n)
    cond, framesteps = scene_cond(scene, n)
    ref = config.inference.reference_frame
    gt_surface = MeshSequence(framesteps, [make_watertight(m, ev.watertight_resolution) for m in gt.frames()]) if ev.watertight else None

    sources = {ref: gt.frame(ref)} if ev.use_reference_source and models.diffusion.supports_sources else None
    if n > models.diffusion.config.n_frames:
        result = autoregressive_rollout(cond, config, models, sources, framesteps)
    else:
        result = infer_sequence_to_4d(cond, sources, config, models, framesteps)
    if result.animated is None:
        raise GeometryError(f"no animated mesh for scene {scene.scene_id}: {result.failures}")

    reports = {"full": score_scene(scene.scene_id, "full", gt, result.animated, ev, result.timings, gt_surface)}
    failures: dict[str, str] = {}
    if not ev.baselines:
        return reports, failures

    def per_frame() -> MetricsReport:
        ref_latent = None
        if sources:
            ref_latent = encode_mesh(gt.frame(ref), models.vae, config.inference.n_points, config.inference.seed + ref)
        timings: dict[str, float] = {}
        with _timed(timings, "per_frame"):
            independent = per_frame_baseline(cond, framesteps, config, models, ref_latent)
        return score_scene(scene.scene_id, "per-frame", gt, independent, ev, timings, gt_surface)

    def zero_deformation() -> MetricsReport:
        still = zero_deformation_baseline(result.animated.frame(ref), framesteps)
        return score_scene(scene.scene_id, "zero-deformation", gt, still, ev, None, gt_surface)

    def reconstruction_only() -> MetricsReport:
        timings: dict[str, float] = {}
        with _timed(timings, "stage2"):
            reconstruction = stage2_only(scene, n, config, models)
        return score_scene(scene.scene_id, "stage2-only", gt, reconstruction, ev, timings, gt_surface)

    for method, baseline in zip(BASELINES, (per_frame, zero_deformation, reconstruction_only)):
        try:
            reports[method] = baseline()
        except Exception as e:
            logger.exception(f"EVAL [BASELINE FAILED] | scene: {scene.scene_id} | method: {method}")
            failures[method] = f"{type(e).__name__}: {e}"
    return reports, failures


def evaluate(
    dataset: Dataset,
    models: Models,
    config: PipelineConfig,
    out_dir: Optional[Path] = None,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
) -> EvaluationResult:
    """Score every held-out scene; a failing scene is reported and left out of the aggregate."""
    task_id = _add_task(progress, "Evaluating scenes", len(dataset))
    methods = ("full",) + (BASELINES if config.eval.baselines else ())
    reports: dict[str, list[MetricsReport]] = {m: [] for m in methods}
    failures: dict[str, dict[str, str]] = {m: {} for m in methods}

    def run(scene: Scene) -> tuple[Scene, Optional[tuple[dict[str, MetricsReport], dict[str, str]]], Optional[str]]:
        try:
            return scene, evaluate_scene(scene, config, models), None
        except Exception as e:
            logger.exception(f"EVAL [FAILED] | scene: {scene.scene_id}")
            return scene, None, f"{type(e).__name__}: {e}"

    if config.eval.workers > 1:
        with ThreadPoolExecutor(max_workers=config.eval.workers) as pool:
            outcomes = []
            for outcome in pool.map(run, dataset):
                outcomes.append(outcome)
                if progress is not None and task_id is not None:
                    progress.update(task_id, advance=1)
    else:
        outcomes = []
        for scene in dataset:
            outcomes.append(run(scene))
            if progress is not None and task_id is not None:
                progress.update(task_id, advance=1)

    for scene, scored, error in outcomes:
        if scored is None:
            for m in methods:
                failures[m][scene.scene_id] = error
            if history is not None:
                history.add_event("failure", scene=scene.scene_id, reason=error)
            continue
        scene_reports, baseline_failures = scored
        for method, report in scene_reports.items():
            reports[method].append(report)
        for method, reason in baseline_failures.items():
            failures[method][scene.scene_id] = reason
            if history is not None:
                history.add_event("failure", scene=scene.scene_id, method=method, reason=reason)
        if history is not None:
            history.add_event("metrics", scene=scene.scene_id, cd3d=scene_reports["full"].cd3d,
                              cd4d=scene_reports["full"].cd4d, cdm=scene_reports["full"].cdm)

    aggregates = {m: aggregate_reports(reports[m], failures[m], method=m) for m in methods}
    result = EvaluationResult(reports, aggregates, failures)
    if out_dir is not None:
        write_evaluation(result, out_dir)
    logger.info(
        f"EVAL [DONE] | scenes: {len(dataset)} | failed: {len(failures['full'])} | "
        f"cd4d: {aggregates['full'].cd4d} | cdm: {aggregates['full'].cdm}"
    )
    return result


def write_evaluation(result: EvaluationResult, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for method, reports in result.reports.items():
        for report in reports:
            path = out_dir / "reports" / method / f"{report.scene_id}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(report.to_text(), encoding="utf-8")
            written.append(path)
        path = out_dir / f"aggregate_{method}.txt"
        path.write_text(result.aggregates[method].to_text(), encoding="utf-8")
        written.append(path)
    return written


# Ablations


@dataclass
class AblationRow:
    label: str
    aggregate: AggregateReport
    notes: dict[str, str] = field(default_factory=dict)


@dataclass
class AblationResult:
    axis: str
    dataset_hash: str
    rows: list[AblationRow]

    def to_text(self) -> str:
        lines = [f"axis: {self.axis}", f"dataset_hash: {self.dataset_hash}"]
        for row in self.rows:
            agg = row.aggregate
            notes = "".join(f" | {k}: {v}" for k, v in sorted(row.notes.items()))
            lines.append(f"{row.label} | cd3d: {agg.cd3d} | cd4d: {agg.cd4d} | cdm: {agg.cdm} | failed: {len(agg.failed)}{notes}")
        return "\n".join(lines) + "\n"


def ablation_variants(axis: str, config: PipelineConfig) -> list[tuple[str, PipelineConfig, tuple[str, ...]]]:
    """``(label, config, phases to retrain)`` for every variant of ``axis``.

    Raises:
        ConfigError: If ``axis`` is unknown.
    """
    if axis == "rotary":
        return [
            ("rotary-on", config.replace_section("diffusion", rotary=True).replace_section("tae", rotary=True), ("diffusion", "tae")),
            ("rotary-off", config.replace_section("diffusion", rotary=False).replace_section("tae", rotary=False), ("diffusion", "tae")),
        ]
    if axis == "masking":
        lo, hi = config.diffusion.n_source_range
        on = config.replace_section("diffusion", n_source_range=[lo, max(hi, 1)])
        return [("masking-on", on, ("diffusion",)), ("masking-off", config.replace_section("diffusion", n_source_range=[0, 0]), ("diffusion",))]
    if axis == "normals":
        return [
            ("normals-on", config.replace_section("tae", normals=True), ("tae",)),
            ("normals-off", config.replace_section("tae", normals=False), ("tae",)),
        ]
    if axis == "time_injection":
        return [
            ("time-token", config.replace_section("tae", time_injection="token"), ("tae",)),
            ("time-query", config.replace_section("tae", time_injection="query"), ("tae",)),
        ]
    if axis == "n_frames":
        variants = []
        for n in (4, 8, 16):
            if n > config.dataset.n_frames:
                logger.warning(f"ABLATION [SKIP] | n_frames {n} exceeds the {config.dataset.n_frames} frames of a scene")
                continue
            inference = {
                "context_window_stage1": min(config.inference.context_window_stage1, n - 1),
                "context_window_stage2": min(config.inference.context_window_stage2, n - 1),
                "reference_frame": min(config.inference.reference_frame, n - 1),
            }
            data = config.to_dict()
            data["diffusion"]["n_frames"] = n
            data["tae"]["n_frames"] = n
            data["inference"].update(inference)
            data["eval"]["eval_frames"] = max(config.eval.eval_frames, 16)
            variants.append((f"n-frames-{n}", build_config(data), ("diffusion", "tae")))
        return variants
    if axis == "context_window":
        variants = []
        for c in (1, 4, 8):
            if c >= config.diffusion.n_frames:
                continue
            variant = config.replace_section("inference", context_window_stage1=c, context_window_stage2=c)
            variants.append((f"context-{c}", variant, ()))
        return variants
    raise ConfigError(f"unknown ablation axis {axis!r}, expected one of {', '.join(ABLATION_AXES)}")


def run_ablation(
    axis: str,
    config: PipelineConfig,
    train_root: Path,
    eval_root: Path,
    out_dir: Path,
    base_checkpoints: Optional[Path] = None,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
) -> AblationResult:
    """Train and evaluate every variant of ``axis`` with the same data and seeds.

    All variants share one shape autoencoder: the one in ``base_checkpoints`` when
    given, otherwise one trained into ``out_dir``. Phases a variant does not change
    are copied from ``base_checkpoints`` or trained once and shared.
    """
    variants = ablation_variants(axis, config)
    out_dir = Path(out_dir)
    train = load_dataset(train_root)
    held_out = load_dataset(eval_root)
    data_hash = dataset_hash(train_root)
    shared_dir = Path(base_checkpoints) if base_checkpoints else out_dir / "shared"
    shared_dir.mkdir(parents=True, exist_ok=True)
    if not checkpoint_path(shared_dir, "vae").exists():
        train_vae_stage(config, train, shared_dir, history, progress)
    for phase, trainer in (("diffusion", train_diffusion_stage), ("tae", train_tae_stage)):
        if not checkpoint_path(shared_dir, phase).exists():
            trainer(config, train, shared_dir, history, progress)

    rows = []
    for label, variant, retrain in variants:
        logger.info(f"ABLATION [VARIANT] | axis: {axis} | variant: {label} | retrain: {list(retrain)}")
        variant_dir = out_dir / label
        variant_dir.mkdir(parents=True, exist_ok=True)
        for phase in CHECKPOINT_NAMES:
            target = checkpoint_path(variant_dir, phase)
            if phase not in retrain and not target.exists():
                target.write_bytes(checkpoint_path(shared_dir, phase).read_bytes())
        if "diffusion" in retrain:
            train_diffusion_stage(variant, train, variant_dir, history, progress)
        if "tae" in retrain:
            train_tae_stage(variant, train, variant_dir, history, progress)
        models = Models.load(variant_dir)

        notes = {"dataset_hash": data_hash[:12]}
        eval_config = variant
        if not models.diffusion.supports_sources:
            notes["source_conditioning"] = _try_sources(variant, models, held_out)
            eval_config = variant.replace_section("eval", use_reference_source=False)
        evaluation = evaluate(held_out, models, eval_config, variant_dir / "eval", history)
        rows.append(AblationRow(label, evaluation.aggregates["full"], notes))

    result = AblationResult(axis, data_hash, rows)
    (out_dir / f"ablation_{axis}.txt").write_text(result.to_text(), encoding="utf-8")
    return result


def _try_sources(config: PipelineConfig, models: Models, held_out: Dataset) -> str:
    """Whether source-conditioned inference is refused, as it must be without masking."""
    scene = held_out.scenes[0]
    cond, framesteps = scene_cond(scene, min(len(scene), models.diffusion.config.n_frames))
    try:
        infer_sequence_to_4d(cond, {0: scene.ground_truth.frame(0)}, config, models, framesteps)
    except CapabilityError:
        return "refused"
    return "accepted"


# Export


def export_scene(
    result: SceneResult,
    path: Path,
    fmt: str = "obj",
    render: bool = False,
    force: bool = False,
) -> list[Path]:
    """Write the animation, the per-frame meshes, the latents and the metrics of a result.

    Layout: ``animated/`` (shared topology, checked on write), ``extracted/``,
    ``latents.npy``, ``metrics.txt`` and ``renders/*.png``.

    Raises:
        ValueError: If ``fmt`` is not ``obj``.
        OutputPathError: If ``path`` cannot be written.
    """
    if fmt != "obj":
        raise ValueError(f"unsupported export format {fmt!r}")
    root = OutputGuard.prepare(Path(path), force)
    written = []
    if result.animated is not None:
        written.append(write_animation(root / "animated", result.animated, fixed_topology=True))
    if result.extracted is not None:
        written.append(write_animation(root / "extracted", result.extracted))
    if result.latents is not None:
        np.save(root / "latents.npy", result.latents.tokens)
        written.append(root / "latents.npy")
    if result.report is not None:
        (root / "metrics.txt").write_text(result.report.to_text(), encoding="utf-8")
        written.append(root / "metrics.txt")
    if render:
        from tempomesh.render import render_animation

        if result.animated is not None:
            written.append(render_animation(result.animated, root / "renders" / "animated.png", title="animated"))
        if result.extracted is not None:
            written.append(render_animation(result.extracted, root / "renders" / "extracted.png", title="extracted"))
    logger.info(f"EXPORT [DONE] | files: {len(written)} | path: {root}")
    return written
