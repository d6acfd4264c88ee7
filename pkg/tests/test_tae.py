import numpy as np
import pytest

from tempomesh.errors import FramestepError, GeometryError, ShapeError
from tempomesh.families import make_animation, make_framesteps, random_family
from tempomesh.geometry import SurfacePointCloud, TriMesh, icosphere
from tempomesh.numerics import make_rng
from tempomesh.tae import (
    DeformationQuery,
    TaeSample,
    TemporalAutoencoder,
    animate,
    check_framesteps,
    decode_deformation,
    encode_sequence,
    tae_loss,
    train_tae,
)
from tempomesh.tdiff import LatentSequence
from tempomesh.vae3d import ShapeAutoencoder


@pytest.fixture
def sequence(tiny_config):
    n = tiny_config.tae.n_frames
    tokens = make_rng(0).standard_normal((n, 4, tiny_config.vae.latent_dim)).astype(np.float32)
    return LatentSequence.clean(tokens, make_framesteps(n, 0.1))


@pytest.fixture
def live_tae(tiny_config):
    return TemporalAutoencoder(tiny_config.tae, tiny_config.vae.latent_dim, seed=0, zero_init=False)


def test_deformation_query_needs_unit_normal():
    DeformationQuery([0, 0, 0], [0, 0, 1], 0.0, 0.1)
    with pytest.raises(GeometryError):
        DeformationQuery([0, 0, 0], [0, 0, 2], 0.0, 0.1)


def test_encode_sequence(tiny_config):
    vae = ShapeAutoencoder(tiny_config.vae, seed=0)
    anim = make_animation(random_family("pulsing-ellipsoid", make_rng(0), 1), 3, seed=0, n_points=64)
    Z = encode_sequence(anim.frames, vae, anim.framesteps)
    assert Z.tokens.shape == (3, 4, tiny_config.vae.latent_dim)
    np.testing.assert_allclose(Z.framesteps, anim.framesteps)
    threaded = encode_sequence(anim.frames, vae, anim.framesteps, workers=2)
    np.testing.assert_array_equal(threaded.tokens, Z.tokens)
    with pytest.raises(GeometryError):
        encode_sequence([SurfacePointCloud(np.zeros((0, 3)), np.zeros((0, 3)))], vae, [0.0])


def test_zero_init_animate_keeps_reference(tiny_config, sequence):
    """With a zero displacement head every frame equals the reference"""
    tae = TemporalAutoencoder(tiny_config.tae, tiny_config.vae.latent_dim, seed=0)
    reference = icosphere(1, 0.5)
    anim = animate(reference, 0.1, sequence, sequence.framesteps, tae)
    assert len(anim) == len(sequence)
    np.testing.assert_array_equal(anim.faces, reference.faces)
    for k in range(len(anim)):
        np.testing.assert_array_equal(anim.vertices[k], reference.vertices)


def test_animate_shares_topology(live_tae, sequence):
    reference = icosphere(1, 0.5)
    anim = animate(reference, 0.0, sequence, sequence.framesteps, live_tae)
    assert anim.vertices.shape == (len(sequence),) + reference.vertices.shape
    assert np.isfinite(anim.vertices).all()
    np.testing.assert_array_equal(anim.faces, reference.faces)


def test_animate_rejects_bad_input(live_tae, sequence):
    """Empty references and framesteps outside the sequence are rejected"""
    with pytest.raises(GeometryError):
        animate(TriMesh.empty(), 0.0, sequence, sequence.framesteps, live_tae)
    with pytest.raises(FramestepError):
        animate(icosphere(0), 0.0, sequence, [0.0, 5.0], live_tae)
    with pytest.raises(FramestepError):
        check_framesteps(LatentSequence.clean(sequence.tokens), 0.0)
    wrong_width = LatentSequence.clean(np.zeros((2, 4, 3), np.float32), [0.0, 0.1])
    with pytest.raises(ShapeError):
        live_tae.context(wrong_width, 0.0, 0.1)


def test_decode_deformation_matches_displacements(live_tae, sequence):
    """Grouped query decoding agrees with decoding each framestep pair directly"""
    sphere = icosphere(1)
    normals = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    queries = [DeformationQuery(p, n, 0.0, 0.2) for p, n in zip(sphere.vertices[:5], normals[:5])]
    queries += [DeformationQuery(p, n, 0.1, 0.3) for p, n in zip(sphere.vertices[5:8], normals[5:8])]
    out = decode_deformation(sequence, queries, live_tae)
    assert out.shape == (8, 3)
    direct = live_tae.displacements(sequence, sphere.vertices[:5], normals[:5], 0.0, 0.2)
    np.testing.assert_allclose(out[:5], direct, rtol=1e-5, atol=1e-7)
    assert decode_deformation(sequence, [], live_tae).shape == (0, 3)


def test_displacements_do_not_depend_on_chunking(live_tae, sequence):
    sphere = icosphere(2)
    normals = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    full = live_tae.displacements(sequence, sphere.vertices, normals, 0.0, 0.3, chunk=64)
    part = live_tae.displacements(sequence, sphere.vertices[:10], normals[:10], 0.0, 0.3, chunk=64)
    np.testing.assert_array_equal(full[:10], part)


def test_query_time_injection(tiny_config, sequence):
    config = tiny_config.replace_section("tae", time_injection="query")
    tae = TemporalAutoencoder(config.tae, tiny_config.vae.latent_dim, seed=0, zero_init=False)
    anim = animate(icosphere(0, 0.5), 0.0, sequence, sequence.framesteps, tae)
    assert np.isfinite(anim.vertices).all()


def test_tae_training(tiny_config, temp_dir):
    """Training on analytic motion writes a reloadable checkpoint"""
    family = random_family("orbiting-pair", make_rng(1), mesh_detail=1)
    n = tiny_config.tae.n_frames
    latents = make_rng(2).standard_normal((n + 1, 4, tiny_config.vae.latent_dim)).astype(np.float32)
    samples = [TaeSample(family, latents, make_framesteps(n + 1))]
    model = TemporalAutoencoder(tiny_config.tae, tiny_config.vae.latent_dim, seed=0)
    assert np.isfinite(tae_loss(model, samples, make_rng(0)).item())

    trained, result = train_tae(
        samples, tiny_config.tae, tiny_config.vae.latent_dim, checkpoint_path=temp_dir / "tae.ckpt"
    )
    assert result.steps == tiny_config.tae.steps
    restored = TemporalAutoencoder.from_checkpoint(temp_dir / "tae.ckpt")
    assert restored.latent_dim == tiny_config.vae.latent_dim
    for name, value in trained.state_dict().items():
        np.testing.assert_array_equal(restored.state_dict()[name], value)
    with pytest.raises(ValueError):
        train_tae([], tiny_config.tae, tiny_config.vae.latent_dim)
