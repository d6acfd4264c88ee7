import copy
import shutil
from contextlib import contextmanager
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
from loguru import logger

from tempomesh.config import DEFAULT_SETTINGS, build_config
from tempomesh.dataset import generate_dataset, load_dataset
from tempomesh.families import COND_DIM
from tempomesh.geometry import icosphere
from tempomesh.pipeline import Models
from tempomesh.tae import TemporalAutoencoder
from tempomesh.tdiff import TemporalDenoiser
from tempomesh.vae3d import ShapeAutoencoder

TINY_OVERRIDES = {
    "dataset": {
        "count": 4,
        "eval_count": 2,
        "n_frames": 6,
        "n_points": 256,
        "mesh_detail": 1,
        "families": ["pulsing-ellipsoid", "orbiting-pair"],
    },
    "vae": {
        "latent_tokens": 4,
        "latent_dim": 8,
        "width": 16,
        "heads": 2,
        "encoder_blocks": 1,
        "decoder_blocks": 1,
        "fourier_freqs": 4,
        "encoder_points": 64,
        "queries_per_shape": 64,
        "steps": 3,
        "batch": 2,
        "decode_chunk": 512,
        "log_every": 1,
    },
    "diffusion": {
        "n_frames": 4,
        "latent_tokens": 4,
        "dim": 8,
        "width": 16,
        "heads": 2,
        "blocks": 1,
        "cond_tokens": 2,
        "steps": 3,
        "batch": 2,
        "log_every": 1,
    },
    "tae": {
        "n_frames": 4,
        "width": 16,
        "heads": 2,
        "blocks": 1,
        "position_freqs": 4,
        "time_freqs": 4,
        "queries_per_step": 32,
        "steps": 3,
        "batch": 2,
        "log_every": 1,
    },
    "inference": {"flow_steps": 2, "grid": 12, "n_points": 128},
    "eval": {
        "n_points": 128,
        "eval_frames": 4,
        "icp_points": 64,
        "icp_iterations": 5,
        "icp_restarts": 1,
        "icp_refine_steps": 2,
    },
    "logging": {"enable_console_logging": False, "enable_file_logging": False},
}


def tiny_settings() -> dict:
    """Default settings shrunk so every network runs in well under a second."""
    data = copy.deepcopy(DEFAULT_SETTINGS)
    for section, values in TINY_OVERRIDES.items():
        data[section].update(values)
    return data


@pytest.fixture
def temp_dir(tmp_path):
    """Create a temporary directory for testing."""
    yield tmp_path
    # Ensure cleanup
    if tmp_path.exists():
        shutil.rmtree(tmp_path)


@pytest.fixture(autouse=True)
def mock_home_dir(temp_dir, monkeypatch):
    """Mock home directory to use temporary directory."""

    def mock_home():
        return Path(temp_dir)

    monkeypatch.setattr(Path, "home", mock_home)
    yield temp_dir


@pytest.fixture
def test_logger():
    """Create a test logger that doesn't write to disk."""
    logger.remove()
    test_handler_id = logger.add(lambda msg: None, level="INFO")
    yield logger
    logger.remove(test_handler_id)


@pytest.fixture
def mock_progress_bar():
    """Create a mock progress bar object."""
    mock_bar = MagicMock()
    mock_bar.add_task.return_value = 1
    mock_bar.update = MagicMock()
    mock_bar.remove_task = MagicMock()
    return mock_bar


@contextmanager
def mock_settings_context(temp_dir):
    """Context manager to mock settings path and ensure cleanup."""
    settings_path = temp_dir / ".tempomesh" / "settings.toml"
    with patch("tempomesh.config.DEFAULT_SETTINGS_PATH", settings_path):
        yield settings_path
    if settings_path.exists():
        settings_path.unlink()


@pytest.fixture(autouse=True)
def mock_settings_file(temp_dir):
    """Mock DEFAULT_SETTINGS_PATH to use temporary directory."""
    with mock_settings_context(temp_dir) as settings_path:
        yield settings_path


@pytest.fixture
def tiny_config():
    """Validated pipeline configuration sized for tests."""
    return build_config(tiny_settings())


@pytest.fixture
def tiny_models(tiny_config):
    """Untrained networks with zero-initialised output heads."""
    return Models(
        ShapeAutoencoder(tiny_config.vae, seed=0),
        TemporalDenoiser(tiny_config.diffusion, COND_DIM, seed=0),
        TemporalAutoencoder(tiny_config.tae, tiny_config.vae.latent_dim, seed=0),
    )


@pytest.fixture
def sphere_extraction(tiny_models, monkeypatch):
    """Make mesh extraction return a fixed sphere, since untrained decoders give no surface."""
    monkeypatch.setattr(tiny_models.vae, "extract_mesh", lambda z, resolution: icosphere(1, 0.5))
    return tiny_models


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    """Train and eval splits written once per session."""
    config = build_config(tiny_settings())
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(config.dataset, root / "train", split="train")
    generate_dataset(config.dataset, root / "eval", split="eval")
    return root


@pytest.fixture
def tiny_train(tiny_dataset_root):
    return load_dataset(tiny_dataset_root / "train")


@pytest.fixture
def tiny_eval(tiny_dataset_root):
    return load_dataset(tiny_dataset_root / "eval")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
