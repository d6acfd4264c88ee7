"""Temporal autoencoder: latent sequence -> displacement field between two framesteps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from loguru import logger

from tempomesh.checkpoint import load_checkpoint
from tempomesh.config import TaeConfig
from tempomesh.errors import CheckpointError, FramestepError, GeometryError, ShapeError
from tempomesh.families import AnimationFamily
from tempomesh.geometry import AnimatedMesh, SurfacePointCloud, TriMesh, sample_surface, vertex_normals
from tempomesh.history import RunHistory
from tempomesh.layers import CrossBlock, FeedForward, LayerNorm, Linear, Module, TransformerBlock, fourier_features
from tempomesh.numerics import Tensor, add, as_tensor, concat, make_rng, mean, mul, reshape, square, sub, tsum
from tempomesh.tdiff import LatentSequence
from tempomesh.training import FrozenGuard, ProgressBarProtocol, TrainingResult, run_training
from tempomesh.vae3d import ShapeAutoencoder

FRAMESTEP_TOLERANCE = 1e-9
DECODE_CHUNK = 1024


@dataclass
class DeformationQuery:
    """A surface point with its normal, moved from ``t_src`` to ``t_dst``."""

    position: np.ndarray
    normal: np.ndarray
    t_src: float
    t_dst: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = float(np.linalg.norm(self.normal))
        if abs(length - 1.0) > 1e-4:
            raise GeometryError(f"query normal must be unit length, got norm {length:.6f}")


def encode_sequence(
    clouds: Sequence[SurfacePointCloud],
    vae: ShapeAutoencoder,
    framesteps: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> LatentSequence:
    """Encode every frame independently with the frozen shape encoder.

    Raises:
        GeometryError: If there are no frames or a frame is empty.
    """
    if not clouds:
        raise GeometryError("cannot encode an empty frame sequence")
    for k, cloud in enumerate(clouds):
        if len(cloud) == 0:
            raise GeometryError(f"frame {k} has an empty point cloud")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            latents = list(pool.map(vae.encode, clouds))
    else:
        latents = [vae.encode(cloud) for cloud in clouds]
    return LatentSequence.clean(np.stack([z.tokens for z in latents]), framesteps)


class TemporalAutoencoder(Module):
    """Inflated self-attention over the frame latents, then a cross-attention displacement head.

    Args:
        config: Temporal autoencoder settings.
        latent_dim: Width ``D`` of the frame latents.
        seed: Initialisation seed; ``config.seed`` when None.
        zero_init: Start the displacement head at zero.
    """

    def __init__(
        self,
        config: TaeConfig,
        latent_dim: int,
        seed: Optional[int] = None,
        zero_init: bool = True,
    ):
        rng = make_rng(config.seed if seed is None else seed)
        width = config.width
        self.config = config
        self.latent_dim = latent_dim
        time_dim = 2 * 2 * config.time_freqs
        query_dim = 3 * 2 * config.position_freqs + 3
        if config.normals:
            query_dim += 3
        if config.time_injection == "query":
            query_dim += time_dim

        self.in_proj = Linear(latent_dim, width, rng)
        self.time_mlp = FeedForward(time_dim, width, rng, out_dim=width)
        self.blocks = [
            TransformerBlock(width, config.heads, rng, rotary=config.rotary, rotary_base=config.rotary_base)
            for _ in range(config.blocks)
        ]
        self.context_ln = LayerNorm(width)
        self.query_proj = Linear(query_dim, width, rng)
        self.cross = CrossBlock(width, config.heads, rng)
        self.head_ln = LayerNorm(width)
        self.head = Linear(width, 3, rng, zero_init=zero_init)

    def _time_features(self, t_src: float, t_dst: float) -> np.ndarray:
        pair = as_tensor(np.array([[t_src, t_dst]]), np.float64)
        return fourier_features(pair, self.config.time_freqs, max_log2=3.0).data

    def context(self, Z: LatentSequence, t_src: float, t_dst: float) -> Tensor:
        """Self-attention context ``(L, W)`` of a sequence for one framestep pair.

        In ``token`` mode the embedded pair is one extra token at rotary position 0;
        in ``query`` mode the context does not depend on the pair.
        """
        dtype = self.in_proj.weight.dtype
        tokens = as_tensor(Z.tokens, dtype)
        n, t, d = tokens.shape
        if d != self.latent_dim:
            raise ShapeError(f"temporal autoencoder expects latent width {self.latent_dim}, got {tokens.shape}")
        x = reshape(self.in_proj(tokens), (n * t, self.config.width))
        positions = np.repeat(np.arange(n, dtype=np.float64), t)
        if self.config.time_injection == "token":
            origin = _origin(Z)
            time_token = self.time_mlp(as_tensor(self._time_features(t_src - origin, t_dst - origin), dtype))
            x = concat([x, time_token], axis=0)
            positions = np.append(positions, 0.0)
        for block in self.blocks:
            x = block(x, positions=positions)
        return self.context_ln(x)

    def query_displacements(
        self,
        context: Tensor,
        positions: Union[np.ndarray, Tensor],
        normals: Optional[np.ndarray],
        time_features: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Displacements ``(M, 3)`` of query points against a context; differentiable in ``positions``."""
        dtype = self.in_proj.weight.dtype
        pos = positions if isinstance(positions, Tensor) else as_tensor(positions, dtype)
        m = pos.shape[0]
        parts = [fourier_features(pos, self.config.position_freqs), pos]
        if self.config.normals:
            if normals is None:
                raise ShapeError("this temporal autoencoder needs query normals")
            parts.append(as_tensor(normals, dtype))
        if self.config.time_injection == "query":
            parts.append(as_tensor(np.repeat(time_features, m, axis=0), dtype))
        h = self.cross(self.query_proj(concat(parts, axis=-1)), context)
        return self.head(self.head_ln(h))

    def displacements(
        self,
        Z: LatentSequence,
        positions: np.ndarray,
        normals: Optional[np.ndarray],
        t_src: float,
        t_dst: float,
        chunk: int = DECODE_CHUNK,
        context: Optional[Tensor] = None,
    ) -> np.ndarray:
        """Displacement of every point from ``t_src`` to ``t_dst``, decoded in fixed-size padded chunks.

        Raises:
            FramestepError: If either framestep lies outside the sequence.
        """
        check_framesteps(Z, t_src, t_dst)
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        normals = None if normals is None else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if context is None:
            context = self.context(Z, t_src, t_dst)
        time_features = None
        if self.config.time_injection == "query":
            origin = _origin(Z)
            time_features = self._time_features(t_src - origin, t_dst - origin)
        out = np.empty_like(positions)
        for start in range(0, len(positions), chunk):
            part = slice(start, start + chunk)
            count = len(positions[part])
            pos = np.zeros((chunk, 3))
            pos[:count] = positions[part]
            nrm = None
            if normals is not None:
                nrm = np.zeros((chunk, 3))
                nrm[:count] = normals[part]
            delta = self.query_displacements(context, pos, nrm, time_features).data
            out[start : start + count] = delta[:count]
        return out

    def checkpoint_metadata(self) -> dict:
        return {"model": "tae", "config": asdict(self.config), "latent_dim": self.latent_dim}

    @classmethod
    def from_checkpoint(cls, path: Path) -> "TemporalAutoencoder":
        ckpt = load_checkpoint(path)
        if ckpt.metadata.get("model") != "tae":
            raise CheckpointError(f"{path} does not hold a temporal autoencoder")
        model = cls(TaeConfig(**ckpt.metadata["config"]), int(ckpt.metadata["latent_dim"]))
        model.load_state_dict(ckpt.params)
        return model


def _origin(Z: LatentSequence) -> float:
    return float(Z.framesteps[0]) if Z.framesteps is not None else 0.0


def _sequence_framesteps(Z: LatentSequence) -> np.ndarray:
    if Z.framesteps is None:
        raise FramestepError("the latent sequence carries no framesteps")
    return Z.framesteps


def check_framesteps(Z: LatentSequence, *steps: float) -> None:
    framesteps = _sequence_framesteps(Z)
    lo, hi = float(framesteps.min()), float(framesteps.max())
    for t in steps:
        if not lo - FRAMESTEP_TOLERANCE <= t <= hi + FRAMESTEP_TOLERANCE:
            raise FramestepError(f"framestep {t} outside the sequence range [{lo}, {hi}]")


def decode_deformation(
    Z: LatentSequence, queries: Sequence[DeformationQuery], params: TemporalAutoencoder
) -> np.ndarray:
    """Displacement ``(M, 3)`` of every query.

    Queries are grouped by framestep pair; in ``query`` mode the self-attention
    context is computed once for all pairs.
    """
    out = np.zeros((len(queries), 3))
    if not queries:
        return out
    check_framesteps(Z, *(q.t_src for q in queries), *(q.t_dst for q in queries))
    groups: dict[tuple[float, float], list[int]] = {}
    for i, q in enumerate(queries):
        groups.setdefault((q.t_src, q.t_dst), []).append(i)
    shared = params.context(Z, 0.0, 0.0) if params.config.time_injection == "query" else None
    for (t_src, t_dst), idx in groups.items():
        positions = np.stack([queries[i].position for i in idx])
        normals = np.stack([queries[i].normal for i in idx])
        out[idx] = params.displacements(Z, positions, normals, t_src, t_dst, context=shared)
    return out


def animate(
    reference: TriMesh,
    ref_step: float,
    Z: LatentSequence,
    framesteps: Sequence[float],
    params: TemporalAutoencoder,
) -> AnimatedMesh:
    """Move the reference vertices to every framestep; faces are the reference faces.

    Raises:
        FramestepError: If ``ref_step`` or any framestep lies outside the sequence.
        GeometryError: If the reference mesh is empty.
    """
    if reference.is_empty:
        raise GeometryError("cannot animate an empty reference mesh")
    framesteps = np.asarray(framesteps, dtype=np.float64).reshape(-1)
    check_framesteps(Z, ref_step, *framesteps)
    normals = vertex_normals(reference)
    shared = params.context(Z, 0.0, 0.0) if params.config.time_injection == "query" else None
    frames = []
    for t in framesteps:
        delta = params.displacements(Z, reference.vertices, normals, ref_step, float(t), context=shared)
        frames.append(reference.vertices + delta)
    logger.debug(f"ANIMATE [DONE] | vertices: {len(reference.vertices)} | frames: {len(framesteps)}")
    return AnimatedMesh(reference.faces, framesteps, np.stack(frames))


@dataclass
class TaeSample:
    """Frame latents of one training sequence with the analytic motion that produced them."""

    family: AnimationFamily
    latents: np.ndarray
    framesteps: np.ndarray
    canonical_mesh: Optional[TriMesh] = None

    def __post_init__(self):
        self.framesteps = np.asarray(self.framesteps, dtype=np.float64)
        if self.canonical_mesh is None:
            self.canonical_mesh = self.family.canonical_mesh()


def tae_loss(
    model: TemporalAutoencoder,
    batch: Sequence[TaeSample],
    rng: np.random.Generator,
) -> Tensor:
    """Mean squared error between predicted and true displacements.

    Each sequence draws a window of ``n_frames`` keyframes, a source and a target
    keyframe in it, and fresh surface points of the canonical mesh, which are
    carried to both framesteps by the family's deformation.
    """
    config = model.config
    n = config.n_frames
    total = None
    for sample in batch:
        frames = len(sample.latents)
        if frames < n:
            raise ShapeError(f"training sequence has {frames} frames, the model needs {n}")
        start = int(rng.integers(0, frames - n + 1))
        Z = LatentSequence.clean(sample.latents[start : start + n], sample.framesteps[start : start + n])
        i, j = rng.integers(0, n, 2)
        t_src, t_dst = float(Z.framesteps[i]), float(Z.framesteps[j])
        cloud = sample_surface(sample.canonical_mesh, config.queries_per_step, int(rng.integers(2**31)))
        x_src, n_src = sample.family.deform(cloud.positions, cloud.normals, t_src)
        x_dst, _ = sample.family.deform(cloud.positions, None, t_dst)
        time_features = None
        if config.time_injection == "query":
            origin = _origin(Z)
            time_features = model._time_features(t_src - origin, t_dst - origin)
        context = model.context(Z, t_src, t_dst)
        pred = model.query_displacements(context, x_src, n_src, time_features)
        err = mean(tsum(square(sub(pred, x_dst - x_src)), axis=-1))
        total = err if total is None else add(total, err)
    return mul(total, 1.0 / len(batch))


def train_tae(
    samples: Sequence[TaeSample],
    config: TaeConfig,
    latent_dim: int,
    frozen: Optional[FrozenGuard] = None,
    checkpoint_path: Optional[Path] = None,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
    task_id: Optional[int] = None,
    model: Optional[TemporalAutoencoder] = None,
) -> tuple[TemporalAutoencoder, TrainingResult]:
    """Train the displacement decoder on latents from the frozen shape encoder."""
    if not samples:
        raise ValueError("train_tae needs at least one sequence")
    model = model or TemporalAutoencoder(config, latent_dim)
    batch = min(config.batch, len(samples))

    def loss_fn(rng: np.random.Generator, step: int) -> Tensor:
        picks = rng.choice(len(samples), batch, replace=False)
        return tae_loss(model, [samples[i] for i in picks], rng)

    metadata = model.checkpoint_metadata()
    if frozen is not None:
        metadata["vae_hash"] = frozen.expected_hash
    result = run_training(
        "tae",
        model,
        loss_fn,
        steps=config.steps,
        rng=make_rng(config.seed + 3),
        lr=config.lr,
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
        log_every=config.log_every,
        checkpoint_every=config.checkpoint_every,
        checkpoint_path=checkpoint_path,
        metadata=metadata,
        history=history,
        frozen=frozen,
        progress=progress,
        task_id=task_id,
    )
    return model, result
