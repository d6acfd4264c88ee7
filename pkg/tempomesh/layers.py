"""Transformer building blocks and the optimiser used by every training phase."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from tempomesh.errors import CheckpointError, ShapeError
from tempomesh.numerics import (
    TRAIN_DTYPE,
    Tensor,
    add,
    concat,
    cos,
    gelu,
    global_norm,
    layer_norm,
    matmul,
    mul,
    reshape,
    scaled_dot_attention,
    sin,
    sub,
    transpose,
)


class Module:
    """Container of named parameters.

    Parameters are the attributes holding tensors that require gradients,
    discovered recursively through sub-modules and lists of sub-modules in
    attribute definition order.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{key}.{i}."))
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy arrays into the parameters, keeping each parameter's dtype.

        Raises:
            CheckpointError: If names or shapes differ from the module's.
        """
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names differ (missing: {missing[:5]}, unexpected: {unexpected[:5]})"
            )
        for name, p in params.items():
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {array.shape}, expected {p.shape}"
                )
            p.data = array.astype(p.dtype, copy=True)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(array: np.ndarray) -> Tensor:
    return Tensor(array.astype(TRAIN_DTYPE), requires_grad=True)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
        init_scale: float = 1.0,
    ):
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = rng.standard_normal((in_features, out_features))
            weight *= init_scale / math.sqrt(in_features)
        self.weight = _param(weight)
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects {self.weight.shape[0]} features, got {x.shape}")
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift)


class FeedForward(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: Optional[int] = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def fourier_features(x: Tensor, n_freqs: int, max_log2: float = 5.0) -> Tensor:
    """Sine/cosine features of every coordinate of ``x`` (shape ``(..., k)``).

    Frequencies are ``pi * 2**e`` for ``n_freqs`` exponents evenly spaced on
    ``[0, max_log2]``. The result has ``k * 2 * n_freqs`` features and is
    differentiable in ``x``.
    """
    freqs = (np.pi * 2.0 ** np.linspace(0.0, max_log2, n_freqs)).astype(x.dtype)
    k = x.shape[-1]
    scaled = mul(reshape(x, x.shape + (1,)), freqs)
    emb = concat([sin(scaled), cos(scaled)], axis=-1)
    return reshape(emb, x.shape[:-1] + (k * 2 * n_freqs,))


def timestep_embedding(values: np.ndarray, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Cosine/sine embedding of scalar values, shape ``values.shape + (dim,)``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(values, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def apply_rotary(x: Tensor, positions: Sequence[float], base: float = 100.0) -> Tensor:
    """Rotate channel pairs ``(j, j + dh/2)`` of ``x`` by ``position * base**(-j/half)``.

    Args:
        x: Tensor of shape ``(..., L, dh)`` with even ``dh``.
        positions: One position per token (length ``L``).
        base: Frequency base.

    Raises:
        ShapeError: If ``dh`` is odd or the position count is not ``L``.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ShapeError(f"rotary embedding needs an even head dimension, got {dh}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[-2],):
        raise ShapeError(f"expected {x.shape[-2]} rotary positions, got {positions.shape}")
    half = dh // 2
    freqs = base ** (-np.arange(half) / half)
    angles = positions[:, None] * freqs[None, :]
    cos_a = np.cos(angles).astype(x.dtype)
    sin_a = np.sin(angles).astype(x.dtype)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return concat(
        [sub(mul(x1, cos_a), mul(x2, sin_a)), add(mul(x1, sin_a), mul(x2, cos_a))], axis=-1
    )


class Attention(Module):
    """Multi-head attention, self or cross, with optional rotary positions."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: Optional[int] = None,
        rotary: bool = False,
        rotary_base: float = 100.0,
    ):
        if dim % heads:
            raise ShapeError(f"width {dim} is not divisible by {heads} heads")
        if rotary and (dim // heads) % 2:
            raise ShapeError(f"rotary embedding needs an even head dimension, got {dim // heads}")
        context_dim = context_dim or dim
        self.heads = heads
        self.rotary = rotary
        self.rotary_base = rotary_base
        self.q = Linear(dim, dim, rng)
        self.k = Linear(context_dim, dim, rng)
        self.v = Linear(context_dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        lead, length, width = x.shape[:-2], x.shape[-2], x.shape[-1]
        x = reshape(x, lead + (length, self.heads, width // self.heads))
        n = x.ndim
        return transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])

    def _merge(self, x: Tensor) -> Tensor:
        n = x.ndim
        x = transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])
        return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))

    def forward(
        self,
        x: Tensor,
        context: Optional[Tensor] = None,
        positions: Optional[Sequence[float]] = None,
        context_positions: Optional[Sequence[float]] = None,
        bias: Optional[np.ndarray] = None,
    ) -> Tensor:
        source = x if context is None else context
        q = self._split(self.q(x))
        k = self._split(self.k(source))
        v = self._split(self.v(source))
        if self.rotary and positions is not None:
            q = apply_rotary(q, positions, self.rotary_base)
            key_positions = positions if context_positions is None else context_positions
            k = apply_rotary(k, key_positions, self.rotary_base)
        return self.out(self._merge(scaled_dot_attention(q, k, v, bias=bias)))


class TransformerBlock(Module):
    """Pre-LN self-attention block with a GELU MLP."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        mlp_ratio: int = 4,
        rotary: bool = False,
        rotary_base: float = 100.0,
    ):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, rotary=rotary, rotary_base=rotary_base)
        self.ln2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor, positions: Optional[Sequence[float]] = None) -> Tensor:
        x = add(x, self.attn(self.ln1(x), positions=positions))
        return add(x, self.mlp(self.ln2(x)))


class CrossBlock(Module):
    """Pre-LN block in which queries attend to a context set, followed by an MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, context_dim: Optional[int] = None):
        context_dim = context_dim or dim
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(context_dim)
        self.attn = Attention(dim, heads, rng, context_dim=context_dim)
        self.ln2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, dim * 4, rng)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        x = add(x, self.attn(self.ln_q(x), context=self.ln_kv(context)))
        return add(x, self.mlp(self.ln2(x)))


@dataclass
class StepStats:
    lr: float
    grad_norm: float
    clipped: bool


class AdamW:
    """Adam with decoupled weight decay, global-norm clipping and cosine decay.

    Args:
        params: Named parameters to optimise.
        lr: Peak learning rate.
        betas: Moment decay rates.
        eps: Denominator offset.
        weight_decay: Decoupled decay coefficient.
        max_grad_norm: Clip the global gradient norm to this value, if set.
        total_steps: Length of the cosine schedule; constant rate when unset.
        min_lr_ratio: Final rate as a fraction of ``lr``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
        max_grad_norm: Optional[float] = 1.0,
        total_steps: Optional[int] = None,
        min_lr_ratio: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.total_steps = total_steps
        self.min_lr_ratio = min_lr_ratio
        self.steps_taken = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        progress = min(self.steps_taken, self.total_steps) / self.total_steps
        floor = self.lr * self.min_lr_ratio
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> StepStats:
        """Apply one update from gradients keyed by parameter tensor."""
        lr = self.current_lr()
        picked = {
            name: np.asarray(grads.get(p, np.zeros_like(p.data)), dtype=p.dtype)
            for name, p in self.params.items()
        }
        norm = global_norm(picked)
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        beta1, beta2 = self.betas
        self.steps_taken += 1
        t = self.steps_taken
        for name, p in self.params.items():
            g = picked[name] * scale if scale != 1.0 else picked[name]
            self.m[name] = beta1 * self.m[name] + (1 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1 - beta2) * g * g
            m_hat = self.m[name] / (1 - beta1**t)
            v_hat = self.v[name] / (1 - beta2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)
        return StepStats(lr=lr, grad_norm=norm, clipped=scale != 1.0)
