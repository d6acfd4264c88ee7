"""Exception types raised across tempomesh.

Each error also derives from the closest builtin, so callers that only know about
``ValueError`` or ``RuntimeError`` keep working.
"""

from typing import Optional


class TempomeshError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TempomeshError, ValueError):
    """Tensor extents do not agree."""


class NonFiniteError(TempomeshError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class ConfigError(TempomeshError, ValueError):
    """Configuration failed schema validation."""


class CheckpointError(TempomeshError, RuntimeError):
    """A checkpoint is missing, truncated or does not match the model."""


class GeometryError(TempomeshError, ValueError):
    """Invalid geometric input (zero area, zero extent, open mesh, bad parameters)."""


class FramestepError(TempomeshError, ValueError):
    """A framestep or frame index lies outside the sequence."""


class FrozenParamsError(TempomeshError, RuntimeError):
    """Parameters that must stay frozen changed during training."""


class CapabilityError(TempomeshError, RuntimeError):
    """The trained model cannot serve the requested inference mode."""


class OutputPathError(TempomeshError, ValueError):
    """An output location is unsafe or unusable."""


class TrainingDivergedError(TempomeshError, RuntimeError):
    """The training loss became non-finite.

    Attributes:
        phase: Training phase name (``vae``, ``diffusion``, ``tae``).
        step: Optimisation step at which the loss diverged.
        lr: Learning rate used at that step.
        grad_norm: Global gradient norm of the previous step, if known.
        dump_path: Where the diagnostic dump was written, if anywhere.
    """

    def __init__(
        self,
        phase: str,
        step: int,
        lr: float,
        grad_norm: Optional[float],
        dump_path: Optional[str] = None,
    ):
        self.phase = phase
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.dump_path = dump_path
        super().__init__(
            f"{phase} training diverged at step {step} "
            f"(lr={lr:.3g}, grad_norm={grad_norm}, dump={dump_path})"
        )
