import numpy as np
import pytest

from tempomesh.errors import GeometryError, ShapeError
from tempomesh.families import random_family
from tempomesh.geometry import SurfacePointCloud, icosphere, sample_surface
from tempomesh.numerics import make_rng
from tempomesh.vae3d import (
    ShapeAutoencoder,
    ShapeLatent,
    ShapeSample,
    canonical_order,
    draw_queries,
    encoder_features,
    occupancy_accuracy,
    supervision_band,
    train_vae,
)


@pytest.fixture
def vae(tiny_config):
    return ShapeAutoencoder(tiny_config.vae, seed=0)


@pytest.fixture
def cloud():
    return sample_surface(icosphere(2, 0.5), 200, seed=1)


def test_latent_shape(vae, cloud, tiny_config):
    z = vae.encode(cloud)
    assert z.tokens.shape == (tiny_config.vae.latent_tokens, tiny_config.vae.latent_dim)
    assert vae.latent_shape == z.tokens.shape


def test_encoding_ignores_point_order(vae, cloud):
    """Permuting the records of a cloud gives the same latent"""
    perm = np.random.default_rng(0).permutation(len(cloud))
    shuffled = SurfacePointCloud(cloud.positions[perm], cloud.normals[perm])
    np.testing.assert_array_equal(vae.encode(cloud).tokens, vae.encode(shuffled).tokens)


def test_canonical_order_is_lexicographic():
    records = np.array([[1, 0, 0, 0, 0, 1], [0, 1, 0, 0, 0, 1], [0, 0, 1, 0, 0, 1], [0, 0, 0, 0, 0, 1]], float)
    order = canonical_order(records)
    np.testing.assert_array_equal(order, [3, 2, 1, 0])


def test_encoder_features_subsample_and_reject_empty():
    cloud = sample_surface(icosphere(1), 100, seed=0)
    feats = encoder_features(cloud, n_freqs=3, max_points=40)
    assert feats.shape == (40, 3 * 2 * 3 + 6)
    with pytest.raises(GeometryError):
        encoder_features(SurfacePointCloud(np.zeros((0, 3)), np.zeros((0, 3))), 3, 40)


def test_shape_latent_validation():
    with pytest.raises(ShapeError):
        ShapeLatent(np.zeros(4))
    with pytest.raises(GeometryError):
        ShapeLatent(np.full((2, 2), np.nan))


def test_decode_is_independent_of_batch(vae, cloud):
    """The occupancy of a point does not depend on the points decoded with it"""
    z = vae.encode(cloud)
    points = make_rng(2).uniform(-1, 1, (700, 3))
    together = vae.decode_occupancy(z, points)
    alone = vae.decode_occupancy(z, points[:5])
    np.testing.assert_array_equal(together[:5], alone)
    assert np.all((together > 0) & (together < 1))


def test_extract_mesh_from_untrained_model(vae, cloud, tiny_config):
    """Extraction returns a mesh, empty when the decoder never crosses the iso level"""
    mesh = vae.extract_mesh(vae.encode(cloud), tiny_config.inference.grid)
    if mesh.is_empty:
        assert mesh.flags == ("empty",)
    else:
        assert mesh.faces.max() < len(mesh.vertices)


def test_queries_and_band(tiny_config):
    fam = random_family("pulsing-ellipsoid", make_rng(0), mesh_detail=1)
    sample = ShapeSample(sample_surface(fam.canonical_mesh(), 100, seed=0), fam, 0.0)
    queries = draw_queries(sample, 64, tiny_config.vae, make_rng(1))
    assert queries.shape == (64, 3)
    assert np.abs(queries).max() <= 1.0
    assert supervision_band(tiny_config.vae, grid=33) == pytest.approx(2.0 / 32)


def test_train_vae_checkpoint_round_trip(tiny_config, temp_dir):
    """A few training steps write a checkpoint that reloads to the same encoder"""
    fam = random_family("orbiting-pair", make_rng(0), mesh_detail=1)
    samples = [
        ShapeSample(sample_surface(fam.canonical_mesh(), 128, seed=s), fam, 0.0) for s in range(2)
    ]
    model, result = train_vae(samples, tiny_config.vae, checkpoint_path=temp_dir / "vae.ckpt")
    assert result.steps == tiny_config.vae.steps
    assert all(np.isfinite(result.losses))
    restored = ShapeAutoencoder.from_checkpoint(temp_dir / "vae.ckpt")
    np.testing.assert_array_equal(
        restored.encode(samples[0].cloud).tokens, model.encode(samples[0].cloud).tokens
    )
    accuracy = occupancy_accuracy(model, samples, n_queries=64)
    assert 0.0 <= accuracy <= 1.0


def test_train_vae_needs_samples(tiny_config):
    with pytest.raises(ValueError):
        train_vae([], tiny_config.vae)
