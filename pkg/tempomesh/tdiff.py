"""Temporal latent diffusion: a rectified-flow denoiser over synchronized frame latents.

A sequence of ``N`` frames, each a set of ``T`` latent tokens, is denoised jointly.
Self-attention is inflated over all ``N * T`` tokens with rotary phases that depend
on the frame index only; every frame cross-attends to its own conditioning tokens.
Frames flagged as sources keep their clean latents at flow step 0 during training
and sampling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger

from tempomesh.checkpoint import load_checkpoint
from tempomesh.config import DiffusionConfig
from tempomesh.errors import CapabilityError, CheckpointError, FramestepError, ShapeError
from tempomesh.history import RunHistory
from tempomesh.layers import (
    Attention,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    apply_rotary,
    timestep_embedding,
)
from tempomesh.numerics import Tensor, add, as_tensor, concat, make_rng, mul, reshape, square, sub, tsum
from tempomesh.training import FrozenGuard, ProgressBarProtocol, TrainingResult, run_training
from tempomesh.vae3d import ShapeLatent

MAX_FLOW_STEP = 1000.0
STEP_EMBED_DIM = 64

__all__ = [
    "CondSignal",
    "DiffusionSample",
    "LatentSequence",
    "TemporalDenoiser",
    "apply_rotary",
    "denoiser_forward",
    "diffusion_loss",
    "flow_sample",
    "inflate_attention",
    "make_interpolant",
    "train_diffusion",
]


@dataclass
class LatentSequence:
    """``(N, T, D)`` latents with per-frame flow steps and source flags.

    Attributes:
        tokens: Latent tokens per frame.
        flow_steps: Flow step of each frame in [0, 1000]; 0 is clean data.
        source_mask: Frames pinned to known clean latents.
        framesteps: Times of the frames, when known.
    """

    tokens: np.ndarray
    flow_steps: np.ndarray
    source_mask: np.ndarray
    framesteps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.flow_steps = np.asarray(self.flow_steps, dtype=np.float64).reshape(-1)
        self.source_mask = np.asarray(self.source_mask, dtype=bool).reshape(-1)
        if self.tokens.ndim != 3 or self.tokens.shape[0] < 1:
            raise ShapeError(f"latent sequence tokens must be (N, T, D) with N >= 1, got {self.tokens.shape}")
        n = self.tokens.shape[0]
        if self.flow_steps.shape != (n,) or self.source_mask.shape != (n,):
            raise ShapeError(
                f"{n} frames but {self.flow_steps.shape} flow steps and {self.source_mask.shape} source flags"
            )
        if np.any(self.flow_steps < 0) or np.any(self.flow_steps > MAX_FLOW_STEP):
            raise ValueError("flow steps must lie in [0, 1000]")
        if np.any(self.flow_steps[self.source_mask] != 0):
            raise ValueError("source frames must have flow step 0")
        if self.framesteps is not None:
            self.framesteps = np.asarray(self.framesteps, dtype=np.float64).reshape(-1)
            if self.framesteps.shape != (n,):
                raise ShapeError(f"{n} frames but {len(self.framesteps)} framesteps")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def clean(cls, tokens: np.ndarray, framesteps: Optional[Sequence[float]] = None) -> "LatentSequence":
        n = len(tokens)
        return cls(tokens, np.zeros(n), np.zeros(n, dtype=bool), framesteps)

    def frame(self, k: int) -> ShapeLatent:
        return ShapeLatent(self.tokens[k])

    def window(self, start: int, stop: int) -> "LatentSequence":
        fs = None if self.framesteps is None else self.framesteps[start:stop]
        return LatentSequence(
            self.tokens[start:stop], self.flow_steps[start:stop], self.source_mask[start:stop], fs
        )


@dataclass
class CondSignal:
    """``(N, C)`` per-frame conditioning descriptors."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ShapeError(f"conditioning must be (N, C) with N >= 1, got {self.vectors.shape}")

    def __len__(self) -> int:
        return len(self.vectors)

    def window(self, start: int, stop: int) -> "CondSignal":
        return CondSignal(self.vectors[start:stop])


def inflate_attention(
    x: Tensor, frame_indices: Sequence[float], attn: Attention
) -> Tensor:
    """Self-attention over all tokens of all frames.

    ``(N, L, W)`` is flattened to ``(1, N * L, W)``, attended with every token of
    frame ``k`` at rotary position ``frame_indices[k]``, and reshaped back.

    Raises:
        ShapeError: If ``frame_indices`` does not have one entry per frame.
    """
    n, length, width = x.shape
    frame_indices = np.asarray(frame_indices, dtype=np.float64).reshape(-1)
    if len(frame_indices) != n:
        raise ShapeError(f"{n} frames but {len(frame_indices)} frame indices")
    flat = reshape(x, (1, n * length, width))
    positions = np.repeat(frame_indices, length)
    return reshape(attn(flat, positions=positions), (n, length, width))


def make_interpolant(
    z0: np.ndarray, eps: np.ndarray, s: Union[float, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Point on the straight path from data (s=0) to noise (s=1000) and its velocity.

    ``s`` is a scalar or one value per frame (leading axis of ``z0``).

    Raises:
        ValueError: If any ``s`` lies outside [0, 1000].
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > MAX_FLOW_STEP):
        raise ValueError(f"flow step must be in [0, 1000], got {s}")
    sigma = s / MAX_FLOW_STEP
    if sigma.ndim == 1:
        sigma = sigma.reshape((-1,) + (1,) * (np.ndim(z0) - 1))
    z0 = np.asarray(z0)
    dtype = z0.dtype if z0.dtype in (np.float32, np.float64) else np.float64
    z_s = ((1.0 - sigma) * z0 + sigma * eps).astype(dtype)
    velocity = (np.asarray(eps) - z0).astype(dtype)
    return z_s, velocity


class DenoiserBlock(Module):
    """Inflated self-attention, per-frame cross-attention to the conditioning, MLP."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, rotary: bool, rotary_base: float):
        self.ln_self = LayerNorm(width)
        self.self_attn = Attention(width, heads, rng, rotary=rotary, rotary_base=rotary_base)
        self.ln_cross = LayerNorm(width)
        self.cross_attn = Attention(width, heads, rng)
        self.ln_mlp = LayerNorm(width)
        self.mlp = FeedForward(width, 4 * width, rng)

    def forward(self, x: Tensor, cond: Tensor, frame_indices: np.ndarray) -> Tensor:
        x = add(x, inflate_attention(self.ln_self(x), frame_indices, self.self_attn))
        x = add(x, self.cross_attn(self.ln_cross(x), context=cond))
        return add(x, self.mlp(self.ln_mlp(x)))


class TemporalDenoiser(Module):
    """Velocity predictor for latent sequences.

    Args:
        config: Diffusion settings.
        cond_dim: Width of the per-frame conditioning descriptor.
        seed: Initialisation seed; ``config.seed`` when None.
        zero_init: Start the output projection at zero.
    """

    def __init__(
        self,
        config: DiffusionConfig,
        cond_dim: int,
        seed: Optional[int] = None,
        zero_init: bool = True,
    ):
        rng = make_rng(config.seed if seed is None else seed)
        width = config.width
        self.config = config
        self.cond_dim = cond_dim
        self.in_proj = Linear(config.dim, width, rng)
        self.step_mlp = FeedForward(STEP_EMBED_DIM, width, rng, out_dim=width)
        self.cond_proj = Linear(cond_dim, config.cond_tokens * width, rng)
        self.blocks = [
            DenoiserBlock(width, config.heads, rng, config.rotary, config.rotary_base)
            for _ in range(config.blocks)
        ]
        self.out_ln = LayerNorm(width)
        self.out_proj = Linear(width, config.dim, rng, zero_init=zero_init)

    @property
    def supports_sources(self) -> bool:
        return self.config.supports_sources

    def forward(
        self,
        tokens: Union[np.ndarray, Tensor],
        flow_steps: np.ndarray,
        cond: np.ndarray,
        frame_indices: Optional[Sequence[float]] = None,
    ) -> Tensor:
        dtype = self.in_proj.weight.dtype
        tokens = as_tensor(tokens, dtype)
        n, t, d = tokens.shape
        cond = np.asarray(cond)
        flow_steps = np.asarray(flow_steps, dtype=np.float64).reshape(-1)
        if d != self.config.dim:
            raise ShapeError(f"denoiser expects latent width {self.config.dim}, got {tokens.shape}")
        if cond.shape != (n, self.cond_dim):
            raise ShapeError(f"conditioning {cond.shape} does not match {n} frames of width {self.cond_dim}")
        if flow_steps.shape != (n,):
            raise ShapeError(f"{n} frames but {flow_steps.shape} flow steps")
        if frame_indices is None:
            frame_indices = np.arange(n, dtype=np.float64)
        frame_indices = np.asarray(frame_indices, dtype=np.float64)

        width = self.config.width
        x = self.in_proj(tokens)
        step_token = self.step_mlp(as_tensor(timestep_embedding(flow_steps, STEP_EMBED_DIM), dtype))
        x = concat([x, reshape(step_token, (n, 1, width))], axis=1)
        ctx = reshape(self.cond_proj(as_tensor(cond, dtype)), (n, self.config.cond_tokens, width))
        for block in self.blocks:
            x = block(x, ctx, frame_indices)
        return self.out_proj(self.out_ln(x[:, :t]))

    def predict(self, seq: LatentSequence, cond: "CondSignal", frame_indices=None) -> np.ndarray:
        return self.forward(seq.tokens, seq.flow_steps, cond.vectors, frame_indices).data

    def checkpoint_metadata(self) -> dict:
        return {
            "model": "diffusion",
            "config": asdict(self.config),
            "cond_dim": self.cond_dim,
            "supports_sources": self.supports_sources,
        }

    @classmethod
    def from_checkpoint(cls, path: Path) -> "TemporalDenoiser":
        ckpt = load_checkpoint(path)
        if ckpt.metadata.get("model") != "diffusion":
            raise CheckpointError(f"{path} does not hold a diffusion denoiser")
        model = cls(DiffusionConfig(**ckpt.metadata["config"]), int(ckpt.metadata["cond_dim"]))
        model.load_state_dict(ckpt.params)
        return model


def denoiser_forward(Z: LatentSequence, cond: CondSignal, params: TemporalDenoiser) -> np.ndarray:
    if len(cond) != len(Z):
        raise ShapeError(f"{len(Z)} latent frames but {len(cond)} conditioning frames")
    return params.predict(Z, cond)


@dataclass
class DiffusionSample:
    """Clean frame latents of one training sequence and their conditioning."""

    latents: np.ndarray
    cond: np.ndarray


def diffusion_loss(
    model: TemporalDenoiser,
    batch: Sequence[DiffusionSample],
    rng: np.random.Generator,
) -> Optional[Tensor]:
    """Masked velocity MSE over a batch.

    Each sequence draws one flow step ``s`` for all of its frames and ``N_S``
    source frames from ``n_source_range``; sources are kept clean at step 0 and
    excluded from the loss. Returns None when every frame of every sequence is a
    source.
    """
    config = model.config
    lo, hi = int(config.n_source_range[0]), int(config.n_source_range[1])
    n = config.n_frames
    total = None
    supervised = 0
    for sample in batch:
        frames = len(sample.latents)
        if frames < n:
            raise ShapeError(f"training sequence has {frames} frames, the model needs {n}")
        start = int(rng.integers(0, frames - n + 1))
        z0 = np.asarray(sample.latents[start : start + n], dtype=np.float32)
        cond = sample.cond[start : start + n]
        s = float(rng.uniform(0.0, MAX_FLOW_STEP))
        n_sources = min(int(rng.integers(lo, hi + 1)), n)
        sources = rng.choice(n, n_sources, replace=False) if n_sources else np.zeros(0, dtype=int)
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        steps = np.full(n, s)
        steps[sources] = 0.0
        z_s, velocity = make_interpolant(z0, eps, steps)
        z_s[sources] = z0[sources]
        mask = np.ones((n, 1, 1), dtype=np.float32)
        mask[sources] = 0.0
        count = int(mask.sum())
        if count == 0:
            continue
        pred = model(z_s, steps, cond)
        err = tsum(mul(square(sub(pred, velocity)), mask))
        term = mul(err, 1.0 / (count * z0.shape[1] * z0.shape[2]))
        total = term if total is None else add(total, term)
        supervised += 1
    if total is None:
        return None
    return mul(total, 1.0 / supervised)


def train_diffusion(
    samples: Sequence[DiffusionSample],
    config: DiffusionConfig,
    cond_dim: int,
    frozen: Optional[FrozenGuard] = None,
    checkpoint_path: Optional[Path] = None,
    history: Optional[RunHistory] = None,
    progress: Optional[ProgressBarProtocol] = None,
    task_id: Optional[int] = None,
    model: Optional[TemporalDenoiser] = None,
) -> tuple[TemporalDenoiser, TrainingResult]:
    """Train the denoiser on latent sequences produced by the frozen autoencoder."""
    if not samples:
        raise ValueError("train_diffusion needs at least one sequence")
    model = model or TemporalDenoiser(config, cond_dim)
    batch = min(config.batch, len(samples))

    def loss_fn(rng: np.random.Generator, step: int) -> Optional[Tensor]:
        picks = rng.choice(len(samples), batch, replace=False)
        return diffusion_loss(model, [samples[i] for i in picks], rng)

    metadata = model.checkpoint_metadata()
    if frozen is not None:
        metadata["vae_hash"] = frozen.expected_hash
    result = run_training(
        "diffusion",
        model,
        loss_fn,
        steps=config.steps,
        rng=make_rng(config.seed + 2),
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


def _source_tokens(value: Union[ShapeLatent, np.ndarray]) -> np.ndarray:
    tokens = value.tokens if isinstance(value, ShapeLatent) else np.asarray(value)
    return np.asarray(tokens, dtype=np.float32)


def flow_sample(
    cond: CondSignal,
    sources: Optional[Mapping[int, Union[ShapeLatent, np.ndarray]]],
    steps: int,
    seed: int,
    params: TemporalDenoiser,
    framesteps: Optional[Sequence[float]] = None,
    frame_offset: int = 0,
) -> LatentSequence:
    """Euler integration of the learned velocity from s=1000 down to s=0.

    Before every denoiser call the source frames are overwritten with their clean
    latents at flow step 0, and the returned source frames are the given latents.

    Args:
        cond: Conditioning of the ``N`` frames to generate.
        sources: Clean latents keyed by frame index in ``[0, N)``.
        steps: Number of uniform Euler steps.
        seed: Seed of the initial noise.
        params: Trained denoiser.
        framesteps: Frame times stored on the result.
        frame_offset: Added to every rotary frame index.

    Raises:
        FramestepError: If a source index lies outside the sequence.
        CapabilityError: If sources are given to a model trained without them.
        ValueError: If ``steps`` < 1.
    """
    if steps < 1:
        raise ValueError(f"flow sampling needs at least one step, got {steps}")
    n = len(cond)
    t, d = params.config.latent_tokens, params.config.dim
    sources = {int(k): _source_tokens(v) for k, v in (sources or {}).items()}
    bad = sorted(k for k in sources if not 0 <= k < n)
    if bad:
        raise FramestepError(f"source frame indices {bad} outside [0, {n})")
    if sources and not params.supports_sources:
        raise CapabilityError(
            "this denoiser was trained without source frames and cannot condition on 3D inputs"
        )
    src = np.array(sorted(sources), dtype=int)
    mask = np.zeros(n, dtype=bool)
    mask[src] = True
    frame_indices = np.arange(n, dtype=np.float64) + frame_offset

    if len(src) == n:
        tokens = np.stack([sources[k] for k in range(n)])
        return LatentSequence(tokens, np.zeros(n), mask, framesteps)

    z = make_rng(seed).standard_normal((n, t, d)).astype(np.float32)
    grid = np.linspace(MAX_FLOW_STEP, 0.0, steps + 1)
    for s_now, s_next in zip(grid[:-1], grid[1:]):
        for k in src:
            z[k] = sources[k]
        flow = np.full(n, s_now)
        flow[src] = 0.0
        velocity = params.forward(z, flow, cond.vectors, frame_indices).data
        z = (z + ((s_next - s_now) / MAX_FLOW_STEP) * velocity).astype(np.float32)
    for k in src:
        z[k] = sources[k]
    logger.debug(f"SAMPLE [DONE] | frames: {n} | sources: {src.tolist()} | steps: {steps}")
    return LatentSequence(z, np.zeros(n), mask, framesteps)
