"""Shape autoencoder: oriented point cloud -> latent token set -> occupancy field."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy.special import expit

from tempomesh.checkpoint import load_checkpoint
from tempomesh.config import VaeConfig
from tempomesh.errors import CheckpointError, GeometryError, ShapeError
from tempomesh.geometry import (
    OccupancyField,
    SurfacePointCloud,
    TriMesh,
    grid_points,
    marching_cubes,
)
from tempomesh.history import RunHistory
from tempomesh.layers import CrossBlock, LayerNorm, Linear, Module, TransformerBlock, fourier_features
from tempomesh.numerics import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    make_rng,
    mean,
    mul,
    reshape,
    square,
)
from tempomesh.training import ProgressBarProtocol, TrainingResult, run_training

ISO_LEVEL = 0.5


@dataclass
class ShapeLatent:
    """``(T, D)`` latent token set of one shape."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise ShapeError(f"a shape latent is (T, D), got {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise GeometryError("shape latent has non-finite values")


@dataclass
class ShapeSample:
    """One supervised shape: its surface cloud and the field that labels queries."""

    cloud: SurfacePointCloud
    field: OccupancyField
    framestep: float = 0.0


def canonical_order(records: np.ndarray) -> np.ndarray:
    """Indices sorting ``(P, 6)`` records lexicographically by x, y, z, then normal."""
    return np.lexsort(records.T[::-1])


def encoder_features(
    cloud: SurfacePointCloud, n_freqs: int, max_points: int, seed: int = 0
) -> np.ndarray:
    """Encoder input rows: Fourier(position), position, normal.

    Records are put in canonical order first, so any permutation of the cloud gives
    the same rows. Clouds larger than ``max_points`` are subsampled with a seeded
    draw on that canonical order.

    Raises:
        GeometryError: If the cloud is empty.
    """
    if len(cloud) == 0:
        raise GeometryError("cannot encode an empty point cloud")
    records = cloud.records[canonical_order(cloud.records)]
    if len(records) > max_points:
        keep = np.sort(make_rng(seed).choice(len(records), max_points, replace=False))
        records = records[keep]
    positions = records[:, :3]
    fourier = fourier_features(as_tensor(positions, np.float64), n_freqs).data
    return np.concatenate([fourier, records], axis=1)


def query_features(points: np.ndarray, n_freqs: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([fourier_features(as_tensor(points, np.float64), n_freqs).data, points], axis=1)


class ShapeAutoencoder(Module):
    """Learned query tokens cross-attend to the point set; query points cross-attend to the latents."""

    def __init__(self, config: VaeConfig, seed: Optional[int] = None):
        rng = make_rng(config.seed if seed is None else seed)
        width, heads = config.width, config.heads
        self.config = config
        point_dim = 3 * 2 * config.fourier_freqs + 6
        query_dim = 3 * 2 * config.fourier_freqs + 3

        self.point_proj = Linear(point_dim, width, rng)
        self.queries = Tensor(
            (rng.standard_normal((config.latent_tokens, width)) * 0.5).astype(np.float32),
            requires_grad=True,
        )
        self.encoder_cross = CrossBlock(width, heads, rng)
        self.encoder_blocks = [TransformerBlock(width, heads, rng) for _ in range(config.encoder_blocks)]
        self.encoder_ln = LayerNorm(width)
        self.to_latent = Linear(width, config.latent_dim, rng)

        self.from_latent = Linear(config.latent_dim, width, rng)
        self.decoder_blocks = [TransformerBlock(width, heads, rng) for _ in range(config.decoder_blocks)]
        self.query_proj = Linear(query_dim, width, rng)
        self.decoder_cross = CrossBlock(width, heads, rng)
        self.head_ln = LayerNorm(width)
        self.head = Linear(width, 1, rng)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.config.latent_tokens, self.config.latent_dim

    # Differentiable paths

    def encode_tokens(self, features: Union[np.ndarray, Tensor]) -> Tensor:
        """``(P, F)`` encoder rows -> ``(T, D)`` latent tokens."""
        x = self.point_proj(as_tensor(features, self.queries.dtype))
        h = self.encoder_cross(self.queries, x)
        for block in self.encoder_blocks:
            h = block(h)
        return self.to_latent(self.encoder_ln(h))

    def decoder_context(self, z: Union[np.ndarray, Tensor]) -> Tensor:
        h = self.from_latent(as_tensor(z, self.queries.dtype))
        for block in self.decoder_blocks:
            h = block(h)
        return h

    def query_logits(self, context: Tensor, points: Union[np.ndarray, Tensor]) -> Tensor:
        """Occupancy logits ``(M,)`` of query points against a decoder context."""
        if isinstance(points, Tensor):
            feats = concat([fourier_features(points, self.config.fourier_freqs), points], axis=-1)
        else:
            feats = as_tensor(query_features(points, self.config.fourier_freqs), self.queries.dtype)
        h = self.decoder_cross(self.query_proj(feats), context)
        logits = self.head(self.head_ln(h))
        return reshape(logits, logits.shape[:-1])

    # Inference

    def encode(self, cloud: SurfacePointCloud) -> ShapeLatent:
        """Deterministic latent of ``cloud``; invariant to the order of its records.

        Raises:
            GeometryError: If the cloud is empty.
        """
        feats = encoder_features(cloud, self.config.fourier_freqs, self.config.encoder_points, self.config.seed)
        return ShapeLatent(self.encode_tokens(feats).data.copy())

    def decode_occupancy(
        self, z: Union[ShapeLatent, np.ndarray], points: np.ndarray, chunk: Optional[int] = None
    ) -> np.ndarray:
        """Occupancy in (0, 1) of each point.

        Points are decoded in zero-padded chunks of a fixed size, so the result for a
        point does not depend on how many other points are decoded with it.
        """
        tokens = z.tokens if isinstance(z, ShapeLatent) else np.asarray(z)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        chunk = chunk or self.config.decode_chunk
        context = self.decoder_context(tokens)
        out = np.empty(len(points), dtype=np.float64)
        for start in range(0, len(points), chunk):
            part = points[start : start + chunk]
            padded = np.zeros((chunk, 3))
            padded[: len(part)] = part
            logits = self.query_logits(context, padded).data[: len(part)].astype(np.float64)
            out[start : start + len(part)] = expit(logits)
        return out

    def extract_mesh(self, z: Union[ShapeLatent, np.ndarray], resolution: int) -> TriMesh:
        """Decode on a ``resolution**3`` grid over [-1, 1]^3 and extract the 0.5 iso-surface."""
        values = self.decode_occupancy(z, grid_points(resolution))
        mesh = marching_cubes(values.reshape((resolution,) * 3), ISO_LEVEL)
        logger.debug(f"EXTRACT [MESH] | resolution: {resolution} | faces: {len(mesh.faces)}")
        return mesh

    # Persistence

    def checkpoint_metadata(self) -> dict:
        return {"model": "vae", "config": asdict(self.config)}

    @classmethod
    def from_checkpoint(cls, path: Path) -> "ShapeAutoencoder":
        ckpt = load_checkpoint(path)
        if ckpt.metadata.get("model") != "vae":
            raise CheckpointError(f"{path} does not hold a shape autoencoder")
        model = cls(VaeConfig(**ckpt.metadata["config"]))
        model.load_state_dict(ckpt.params)
        return model


def encode(cloud: SurfacePointCloud, params: ShapeAutoencoder) -> ShapeLatent:
    return params.encode(cloud)


def decode_occupancy(z: ShapeLatent, points: np.ndarray, params: ShapeAutoencoder) -> np.ndarray:
    return params.decode_occupancy(z, points)


def extract_mesh(z: ShapeLatent, resolution: int, params: ShapeAutoencoder) -> TriMesh:
    return params.extract_mesh(z, resolution)


def supervision_band(config: VaeConfig, grid: int = 64) -> float:
    """Half-width of the soft label band: ``band_cells`` grid cells of a ``grid``-cell lattice."""
    return config.band_cells * 2.0 / (grid - 1)


def draw_queries(
    sample: ShapeSample, n_queries: int, config: VaeConfig, rng: np.random.Generator
) -> np.ndarray:
    """Half near-surface (jittered surface samples), half uniform in the cube."""
    n_near = int(round(n_queries * config.near_surface_fraction))
    picks = rng.integers(0, len(sample.cloud), n_near)
    near = sample.cloud.positions[picks] + rng.normal(0.0, config.near_surface_sigma, (n_near, 3))
    uniform = rng.uniform(-1.0, 1.0, (n_queries - n_near, 3))
    return np.clip(np.concatenate([near, uniform]), -1.0, 1.0)


def vae_loss(
    model: ShapeAutoencoder,
    samples: Sequence[ShapeSample],
    rng: np.random.Generator,
    n_queries: Optional[int] = None,
) -> Tensor:
    """Mean soft-label BCE over query points plus the latent L2 term."""
    config = model.config
    n_queries = n_queries or config.queries_per_shape
    band = supervision_band(config)
    total = None
    for sample in samples:
        feats = encoder_features(
            sample.cloud, config.fourier_freqs, config.encoder_points, int(rng.integers(2**31))
        )
        z = model.encode_tokens(feats)
        points = draw_queries(sample, n_queries, config, rng)
        labels = sample.field.occupancy(points, sample.framestep, band)
        logits = model.query_logits(model.decoder_context(z), points)
        term = add(mean(bce_with_logits(logits, labels)), mul(mean(square(z)), config.latent_l2))
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(samples))


def train_vae(
    samples: Sequence[ShapeSample],
    config: VaeConfig,
    checkpoint_path: Optional[Path] = None,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
    task_id: Optional[int] = None,
    model: Optional[ShapeAutoencoder] = None,
) -> tuple[ShapeAutoencoder, TrainingResult]:
    """Train the autoencoder on random batches of ``samples``.

    Raises:
        ValueError: If ``samples`` is empty.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    if not samples:
        raise ValueError("train_vae needs at least one shape sample")
    model = model or ShapeAutoencoder(config)
    batch = min(config.batch, len(samples))

    def loss_fn(rng: np.random.Generator, step: int) -> Tensor:
        picks = rng.choice(len(samples), batch, replace=False)
        return vae_loss(model, [samples[i] for i in picks], rng)

    result = run_training(
        "vae",
        model,
        loss_fn,
        steps=config.steps,
        rng=make_rng(config.seed + 1),
        lr=config.lr,
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
        log_every=config.log_every,
        checkpoint_every=config.checkpoint_every,
        checkpoint_path=checkpoint_path,
        metadata=model.checkpoint_metadata(),
        history=history,
        progress=progress,
        task_id=task_id,
    )
    return model, result


def occupancy_accuracy(
    model: ShapeAutoencoder,
    samples: Sequence[ShapeSample],
    n_queries: int = 2048,
    seed: int = 0,
) -> float:
    """Fraction of correctly classified queries, ignoring points inside the label band."""
    rng = make_rng(seed)
    band = supervision_band(model.config)
    correct = total = 0
    for sample in samples:
        points = draw_queries(sample, n_queries, model.config, rng)
        labels = sample.field.occupancy(points, sample.framestep, 0.0)
        soft = sample.field.occupancy(points, sample.framestep, band)
        keep = (soft == 0.0) | (soft == 1.0)
        pred = model.decode_occupancy(model.encode(sample.cloud), points[keep]) > ISO_LEVEL
        correct += int(np.sum(pred == (labels[keep] > 0.5)))
        total += int(keep.sum())
    return correct / max(total, 1)
