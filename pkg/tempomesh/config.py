from collections import ChainMap
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union, get_args, get_origin, get_type_hints

import toml

from tempomesh.errors import ConfigError
from tempomesh.families import FAMILY_KINDS

DEFAULT_SETTINGS = {
    "dataset": {
        "count": 200,
        "eval_count": 20,
        "n_frames": 16,
        "n_points": 4096,
        "frame_spacing": 1.0 / 15.0,
        "mesh_detail": 2,
        "families": list(FAMILY_KINDS),
        "seed": 0,
        "workers": 1,
    },
    "vae": {
        "latent_tokens": 16,
        "latent_dim": 32,
        "width": 64,
        "heads": 4,
        "encoder_blocks": 2,
        "decoder_blocks": 2,
        "fourier_freqs": 8,
        "encoder_points": 512,
        "queries_per_shape": 512,
        "near_surface_fraction": 0.5,
        "near_surface_sigma": 0.03,
        "band_cells": 1.0,
        "latent_l2": 1e-4,
        "steps": 5000,
        "batch": 8,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "max_grad_norm": 1.0,
        "decode_chunk": 4096,
        "checkpoint_every": 1000,
        "log_every": 50,
        "seed": 0,
    },
    "diffusion": {
        "n_frames": 16,
        "latent_tokens": 16,
        "dim": 32,
        "width": 64,
        "heads": 4,
        "blocks": 4,
        "cond_tokens": 4,
        "rotary": True,
        "rotary_base": 100.0,
        "steps": 10000,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "max_grad_norm": 1.0,
        "batch": 8,
        "n_source_range": [1, 3],
        "checkpoint_every": 1000,
        "log_every": 50,
        "seed": 0,
    },
    "tae": {
        "n_frames": 16,
        "width": 64,
        "heads": 4,
        "blocks": 2,
        "position_freqs": 32,
        "time_freqs": 16,
        "normals": True,
        "time_injection": "token",
        "rotary": True,
        "rotary_base": 100.0,
        "queries_per_step": 256,
        "steps": 5000,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "max_grad_norm": 1.0,
        "batch": 8,
        "checkpoint_every": 1000,
        "log_every": 50,
        "seed": 0,
    },
    "inference": {
        "flow_steps": 30,
        "grid": 64,
        "reference_frame": 0,
        "context_window_stage1": 1,
        "context_window_stage2": 1,
        "stage2_input": "reencode",
        "rollout_handoff": "latent",
        "n_points": 4096,
        "seed": 0,
    },
    "eval": {
        "n_points": 4096,
        "eval_frames": 16,
        "icp_points": 1024,
        "icp_iterations": 200,
        "icp_lr": 1e-2,
        "icp_restarts": 4,
        "icp_refine_steps": 20,
        "watertight": False,
        "watertight_resolution": 128,
        "baselines": True,
        "use_reference_source": True,
        "workers": 1,
        "seed": 0,
    },
    "logging": {
        "enable_console_logging": True,
        "enable_file_logging": True,
        "console_log_level": "WARNING",
        "file_log_level": "INFO",
        "log_file_name": "tempomesh.log",
        "file_mode": "a",
        "log_rotation": "50 MB",
        "log_retention": "10 days",
    },
}

DEFAULT_SETTINGS_PATH = Path.home() / ".tempomesh" / "settings.toml"
RESOLVED_CONFIG_NAME = "resolved_config.toml"


@dataclass(frozen=True)
class DatasetConfig:
    count: int
    eval_count: int
    n_frames: int
    n_points: int
    frame_spacing: float
    mesh_detail: int
    families: list
    seed: int
    workers: int


@dataclass(frozen=True)
class VaeConfig:
    latent_tokens: int
    latent_dim: int
    width: int
    heads: int
    encoder_blocks: int
    decoder_blocks: int
    fourier_freqs: int
    encoder_points: int
    queries_per_shape: int
    near_surface_fraction: float
    near_surface_sigma: float
    band_cells: float
    latent_l2: float
    steps: int
    batch: int
    lr: float
    weight_decay: float
    max_grad_norm: float
    decode_chunk: int
    checkpoint_every: int
    log_every: int
    seed: int


@dataclass(frozen=True)
class DiffusionConfig:
    n_frames: int
    latent_tokens: int
    dim: int
    width: int
    heads: int
    blocks: int
    cond_tokens: int
    rotary: bool
    rotary_base: float
    steps: int
    lr: float
    weight_decay: float
    max_grad_norm: float
    batch: int
    n_source_range: list
    checkpoint_every: int
    log_every: int
    seed: int

    @property
    def supports_sources(self) -> bool:
        return int(self.n_source_range[1]) > 0


@dataclass(frozen=True)
class TaeConfig:
    n_frames: int
    width: int
    heads: int
    blocks: int
    position_freqs: int
    time_freqs: int
    normals: bool
    time_injection: str
    rotary: bool
    rotary_base: float
    queries_per_step: int
    steps: int
    lr: float
    weight_decay: float
    max_grad_norm: float
    batch: int
    checkpoint_every: int
    log_every: int
    seed: int


@dataclass(frozen=True)
class InferenceConfig:
    flow_steps: int
    grid: int
    reference_frame: int
    context_window_stage1: int
    context_window_stage2: int
    stage2_input: str
    rollout_handoff: str
    n_points: int
    seed: int


@dataclass(frozen=True)
class EvalConfig:
    n_points: int
    eval_frames: int
    icp_points: int
    icp_iterations: int
    icp_lr: float
    icp_restarts: int
    icp_refine_steps: int
    watertight: bool
    watertight_resolution: int
    baselines: bool
    use_reference_source: bool
    workers: int
    seed: int


@dataclass(frozen=True)
class LoggingConfig:
    enable_console_logging: bool
    enable_file_logging: bool
    console_log_level: str
    file_log_level: str
    log_file_name: str
    file_mode: str
    log_rotation: str
    log_retention: str


SECTIONS = {
    "dataset": DatasetConfig,
    "vae": VaeConfig,
    "diffusion": DiffusionConfig,
    "tae": TaeConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
    "logging": LoggingConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetConfig
    vae: VaeConfig
    diffusion: DiffusionConfig
    tae: TaeConfig
    inference: InferenceConfig
    eval: EvalConfig
    logging: LoggingConfig

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def replace_section(self, section: str, **changes) -> "PipelineConfig":
        """Copy with some keys of one section changed, validated again."""
        data = self.to_dict()
        data[section].update(changes)
        return build_config(data)

    def validate(self) -> "PipelineConfig":
        """Check ranges and cross-section consistency.

        Raises:
            ConfigError: On the first violated rule.
        """
        d, v, f, t, i, e = self.dataset, self.vae, self.diffusion, self.tae, self.inference, self.eval
        _require(d.count >= 1 and d.eval_count >= 1, "dataset.count and dataset.eval_count must be >= 1")
        _require(d.n_frames >= 2, "dataset.n_frames must be >= 2")
        _require(d.n_points >= 16, "dataset.n_points must be >= 16")
        _require(d.frame_spacing > 0, "dataset.frame_spacing must be positive")
        _require(d.workers >= 1, "dataset.workers must be >= 1")
        unknown = sorted(set(d.families) - set(FAMILY_KINDS))
        _require(d.families and not unknown, f"dataset.families has unknown kinds: {unknown}")

        for name, section in (("vae", v), ("diffusion", f), ("tae", t)):
            _require(section.width % section.heads == 0, f"{name}.width must be divisible by {name}.heads")
            _require((section.width // section.heads) % 2 == 0, f"{name} head dimension must be even")
            _require(section.steps >= 0 and section.batch >= 1, f"{name}.steps/batch out of range")
            _require(section.lr > 0, f"{name}.lr must be positive")
            _require(section.checkpoint_every >= 1 and section.log_every >= 1, f"{name} intervals must be >= 1")

        _require(v.latent_tokens >= 1 and v.latent_dim >= 1, "vae latent shape must be positive")
        _require(0.0 <= v.near_surface_fraction <= 1.0, "vae.near_surface_fraction must be in [0, 1]")
        _require(v.encoder_points >= 1, "vae.encoder_points must be >= 1")
        _require(f.latent_tokens == v.latent_tokens, "diffusion.latent_tokens must equal vae.latent_tokens")
        _require(f.dim == v.latent_dim, "diffusion.dim must equal vae.latent_dim")
        _require(f.n_frames >= 1, "diffusion.n_frames must be >= 1")
        lo, hi = (list(f.n_source_range) + [None, None])[:2]
        _require(
            isinstance(lo, int) and isinstance(hi, int) and 0 <= lo <= hi,
            "diffusion.n_source_range must be [lo, hi] with 0 <= lo <= hi",
        )
        _require(t.n_frames >= 1, "tae.n_frames must be >= 1")
        _require(t.time_injection in ("token", "query"), "tae.time_injection must be 'token' or 'query'")

        _require(i.flow_steps >= 1, "inference.flow_steps must be >= 1")
        _require(i.grid >= 8, "inference.grid must be >= 8")
        _require(i.stage2_input in ("reencode", "latents"), "inference.stage2_input must be 'reencode' or 'latents'")
        _require(i.rollout_handoff in ("latent", "mesh"), "inference.rollout_handoff must be 'latent' or 'mesh'")
        _require(0 <= i.reference_frame < f.n_frames, "inference.reference_frame must be a frame of the window")
        for key in ("context_window_stage1", "context_window_stage2"):
            value = getattr(i, key)
            _require(1 <= value < f.n_frames, f"inference.{key} must satisfy 1 <= c_w < diffusion.n_frames")

        _require(e.n_points >= 4 and e.icp_points >= 4, "eval point counts must be >= 4")
        _require(e.icp_iterations >= 1 and e.icp_restarts >= 1, "eval ICP budget must be >= 1")
        _require(e.eval_frames >= 2, "eval.eval_frames must be >= 2")
        _require(e.workers >= 1, "eval.workers must be >= 1")
        _require(self.logging.file_mode in ("a", "w"), "logging.file_mode must be 'a' or 'w'")
        return self


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _coerce(section: str, key: str, value: Any, expected: Any) -> Any:
    origin = get_origin(expected) or expected
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be a list, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, values: Mapping[str, Any]):
    cls = SECTIONS[name]
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    missing = sorted(known - set(values))
    if missing:
        raise ConfigError(f"missing keys in [{name}]: {', '.join(missing)}")
    return cls(**{k: _coerce(name, k, values[k], hints[k]) for k in known})


def build_config(data: Mapping[str, Mapping[str, Any]]) -> PipelineConfig:
    """Build and validate a :class:`PipelineConfig` from complete section mappings."""
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    sections = {name: _build_section(name, data.get(name, {})) for name in SECTIONS}
    return PipelineConfig(**sections).validate()


def load_settings(settings_file_path: Optional[Path] = None) -> dict:
    """
    Load settings from a TOML file.

    If no file path is provided, the settings are loaded from the default location
    (`~/.tempomesh/settings.toml`), which is created with default values when it
    does not exist yet.

    Args:
        settings_file_path (Path, optional): The path to the settings file. Defaults to None.

    Returns:
        dict: The settings as a dictionary of sections.

    Raises:
        ConfigError: If an explicitly given file is missing or any file cannot be parsed.
    """
    if settings_file_path is None:
        settings_file_path = DEFAULT_SETTINGS_PATH
        if not settings_file_path.exists():
            save_settings(DEFAULT_SETTINGS, settings_file_path)
    elif not Path(settings_file_path).exists():
        raise ConfigError(f"Config file does not exist: {settings_file_path}")

    try:
        with open(settings_file_path, "r") as f:
            return toml.load(f)
    except (toml.TomlDecodeError, OSError) as e:
        raise ConfigError(f"Failed to load settings: {e}") from e


def save_settings(settings: Mapping, settings_file_path: Optional[Path] = None) -> Path:
    """Save settings to a TOML file, overwriting it if it exists.

    Args:
        settings (Mapping): Settings sections to save.
        settings_file_path (Path, optional): Target path. Defaults to `~/.tempomesh/settings.toml`.

    Returns:
        Path: The written file.
    """
    if settings_file_path is None:
        settings_file_path = DEFAULT_SETTINGS_PATH

    settings_file_path = Path(settings_file_path)
    settings_file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(settings_file_path, "w") as f:
        f.write(toml.dumps(dict(settings)))
    return settings_file_path


def get_settings(
    config_path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> PipelineConfig:
    """
    Forms the configuration for a whole run.

    Every section is resolved from:
    - CLI options (highest priority)
    - the settings file (`--config` or the user settings file)
    - default values (lowest priority)

    Args:
        config_path: Explicit TOML file; the user settings file is used when None.
        overrides: Per-section values coming from the command line. ``None``
            values are ignored.

    Returns:
        PipelineConfig: Validated configuration.

    Raises:
        ConfigError: If the file is missing or invalid, or validation fails.
    """
    file_settings = load_settings(Path(config_path) if config_path else None)
    if not isinstance(file_settings, dict):
        raise ConfigError("settings file must contain TOML tables")
    unknown = sorted(set(file_settings) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

    overrides = overrides or {}
    resolved = {}
    for name in SECTIONS:
        cli_settings = {k: v for k, v in (overrides.get(name) or {}).items() if v is not None}
        from_file = file_settings.get(name, {})
        if not isinstance(from_file, dict):
            raise ConfigError(f"[{name}] must be a table")
        # Unknown keys in any tier are reported by _build_section.
        resolved[name] = dict(ChainMap(cli_settings, from_file, DEFAULT_SETTINGS[name]))
    return build_config(resolved)


def write_resolved_config(config: PipelineConfig, out_dir: Path) -> Path:
    """Snapshot the resolved configuration next to a run's outputs."""
    return save_settings(config.to_dict(), Path(out_dir) / RESOLVED_CONFIG_NAME)
