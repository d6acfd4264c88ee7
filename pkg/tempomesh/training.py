"""The optimisation loop shared by the three training phases."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol

import numpy as np
from loguru import logger

from tempomesh.checkpoint import param_hash, save_checkpoint
from tempomesh.errors import FrozenParamsError, NonFiniteError, TrainingDivergedError
from tempomesh.history import RunHistory
from tempomesh.layers import AdamW, Module, StepStats
from tempomesh.numerics import Tape, Tensor, backward

LossFn = Callable[[np.random.Generator, int], Optional[Tensor]]


class ProgressBarProtocol(Protocol):
    """Minimum interface of a progress bar (rich's ``Progress`` satisfies it)."""

    def update(self, task_id: int, advance: Optional[float] = None, **kwargs) -> None: ...
    def add_task(self, description: str, total: Optional[float] = None, **kwargs) -> int: ...


@dataclass
class FrozenGuard:
    """Parameters that must not change while another model trains."""

    module: Module
    expected_hash: str

    @classmethod
    def pin(cls, module: Module) -> "FrozenGuard":
        return cls(module, param_hash(module.state_dict()))

    def check(self, history: Optional[RunHistory] = None) -> str:
        """Recompute the hash and compare it with the pinned one.

        Raises:
            FrozenParamsError: If any parameter changed.
        """
        current = param_hash(self.module.state_dict())
        if history is not None:
            history.assert_frozen(current)
        if current != self.expected_hash:
            raise FrozenParamsError(
                f"frozen parameters changed ({self.expected_hash[:12]} -> {current[:12]})"
            )
        return current


@dataclass
class TrainingResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    skipped: int = 0
    checkpoint: Optional[Path] = None
    last_stats: Optional[StepStats] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def _write_dump(directory: Optional[Path], phase: str, payload: dict[str, Any]) -> Optional[Path]:
    if directory is None:
        return None
    path = Path(directory) / f"{phase}_diverged.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write divergence dump: {e}")
        return None
    return path


def run_training(
    phase: str,
    model: Module,
    loss_fn: LossFn,
    *,
    steps: int,
    rng: np.random.Generator,
    lr: float = 1e-4,
    weight_decay: float = 1e-2,
    max_grad_norm: Optional[float] = 1.0,
    log_every: int = 50,
    checkpoint_every: int = 1000,
    checkpoint_path: Optional[Path] = None,
    metadata: Optional[dict[str, Any]] = None,
    history: Optional[RunHistory] = None,
    frozen: Optional[FrozenGuard] = None,
    progress: Optional[ProgressBarProtocol] = None,
    task_id: Optional[int] = None,
) -> TrainingResult:
    """
    Optimise ``model`` with AdamW for ``steps`` steps.

    ``loss_fn(rng, step)`` builds the scalar loss of one batch; it runs inside an
    open tape. Returning ``None`` skips the step without touching the parameters
    (a batch with nothing to supervise).

    Args:
        phase: Phase name used in logs, dumps and history events.
        model: Module whose parameters are optimised.
        loss_fn: Batch loss builder.
        steps: Number of optimisation steps.
        rng: Generator driving every random draw of the phase.
        lr: Peak learning rate of the cosine schedule.
        weight_decay: Decoupled weight decay.
        max_grad_norm: Global gradient norm clip.
        log_every: Logging interval in steps.
        checkpoint_every: Checkpoint interval in steps; a final checkpoint is
            always written when ``checkpoint_path`` is set.
        checkpoint_path: Where checkpoints go; None disables them.
        metadata: Extra checkpoint metadata.
        history: Run ledger for checkpoint and failure events.
        frozen: Parameters asserted unchanged at every checkpoint.
        progress: Progress bar to advance per step.
        task_id: Progress task.

    Returns:
        TrainingResult: Losses per executed step and the last checkpoint.

    Raises:
        TrainingDivergedError: If the loss or the gradients become non-finite.
        FrozenParamsError: If ``frozen`` parameters changed.
    """
    params = model.named_parameters()
    optimizer = AdamW(
        params,
        lr=lr,
        weight_decay=weight_decay,
        max_grad_norm=max_grad_norm,
        total_steps=max(steps, 1),
        min_lr_ratio=0.1,
    )
    dump_dir = Path(checkpoint_path).parent if checkpoint_path is not None else None
    result = TrainingResult()
    tag = phase.upper()
    logger.info(f"TRAIN_{tag} [START] | steps: {steps} | parameters: {model.num_parameters()}")

    def diverged(step: int, reason: str) -> TrainingDivergedError:
        grad_norm = result.last_stats.grad_norm if result.last_stats else None
        lr_now = optimizer.current_lr()
        payload = {
            "phase": phase,
            "step": step,
            "lr": lr_now,
            "grad_norm": grad_norm,
            "reason": reason,
            "recent_losses": result.losses[-20:],
        }
        dump_path = _write_dump(dump_dir, phase, payload)
        logger.error(
            f"TRAIN_{tag} [DIVERGED] | step: {step} | lr: {lr_now:.3g} | "
            f"grad_norm: {grad_norm} | reason: {reason}"
        )
        if history is not None:
            history.add_event("failure", phase=phase, step=step, reason=reason, dump=dump_path)
        return TrainingDivergedError(phase, step, lr_now, grad_norm, str(dump_path) if dump_path else None)

    def write_checkpoint(step: int) -> None:
        if checkpoint_path is None:
            return
        frozen_hash = frozen.check(history) if frozen is not None else None
        meta = dict(metadata or {})
        meta.update({"phase": phase, "loss": result.final_loss, "frozen_hash": frozen_hash})
        path = save_checkpoint(checkpoint_path, model.state_dict(), step=step, rng=rng, metadata=meta)
        result.checkpoint = path
        if history is not None:
            history.record_checkpoint(
                phase, step, result.final_loss, path, param_hash(model.state_dict()), frozen_hash
            )
        else:
            logger.info(f"TRAIN_{tag} [CHECKPOINT] | step: {step} | path: {path}")

    for step in range(1, steps + 1):
        try:
            with Tape() as tape:
                loss = loss_fn(rng, step)
        except NonFiniteError as e:
            raise diverged(step, str(e)) from e

        if loss is None:
            result.skipped += 1
        else:
            value = loss.item()
            if not math.isfinite(value):
                raise diverged(step, f"loss is {value}")
            grads = backward(tape, loss, wrt=params.values())
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise diverged(step, "non-finite gradient")
            result.last_stats = optimizer.step(grads)
            result.losses.append(value)
            if step % log_every == 0 or step == 1:
                stats = result.last_stats
                logger.info(
                    f"TRAIN_{tag} [STEP] | step: {step} | loss: {value:.5g} | "
                    f"lr: {stats.lr:.3g} | grad_norm: {stats.grad_norm:.4g}"
                )
        result.steps = step

        if step % checkpoint_every == 0 and step != steps:
            write_checkpoint(step)
        if progress is not None and task_id is not None:
            progress.update(task_id, advance=1)

    write_checkpoint(result.steps)
    if frozen is not None and checkpoint_path is None:
        frozen.check(history)
    logger.info(
        f"TRAIN_{tag} [DONE] | steps: {result.steps} | skipped: {result.skipped} | "
        f"final_loss: {result.final_loss}"
    )
    return result
