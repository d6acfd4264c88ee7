import numpy as np
import pytest

from tempomesh.errors import GeometryError
from tempomesh.families import (
    COND_DIM,
    FAMILY_KINDS,
    AnimationFamily,
    cond_descriptor,
    make_animation,
    make_framesteps,
    random_family,
)
from tempomesh.geometry import is_watertight, occupancy
from tempomesh.numerics import make_rng


@pytest.fixture(params=FAMILY_KINDS)
def family(request):
    return random_family(request.param, make_rng(11), mesh_detail=1)


def test_deformation_is_identity_at_zero(family):
    """Every family starts in its canonical pose"""
    mesh = family.canonical_mesh()
    moved, _ = family.deform(mesh.vertices, None, 0.0)
    np.testing.assert_allclose(moved, mesh.vertices, atol=1e-12)


def test_canonical_mesh_is_closed(family):
    assert is_watertight(family.canonical_mesh())


def test_shapes_stay_inside_the_cube(family):
    """Deformed vertices stay inside [-1, 1]^3 for a second of motion"""
    mesh = family.canonical_mesh()
    for t in make_framesteps(16):
        moved, _ = family.deform(mesh.vertices, None, t)
        assert np.abs(moved).max() <= 1.0


def test_deformed_normals_are_unit(family):
    anim = make_animation(family, 4, seed=0, n_points=128)
    for cloud in anim.frames:
        cloud.validate()


def test_frame_clouds_track_canonical_records(family):
    """Record i of every frame is the deformation of canonical record i"""
    anim = make_animation(family, 3, seed=5, n_points=64)
    for cloud, t in zip(anim.frames, anim.framesteps):
        expected, _ = family.deform(anim.canonical.positions, None, t)
        np.testing.assert_allclose(cloud.positions, expected)
    np.testing.assert_allclose(anim.frames[0].positions, anim.canonical.positions, atol=1e-12)
    assert anim.ground_truth.vertices.shape[0] == 3
    assert anim.cond.shape == (3, COND_DIM)


@pytest.mark.parametrize("kind", ["pulsing-ellipsoid", "orbiting-pair"])
def test_analytic_occupancy_matches_mesh(kind):
    """Away from the surface the analytic field agrees with ray parity on the deformed mesh"""
    fam = random_family(kind, make_rng(3), mesh_detail=2)
    t = 0.4
    mesh = fam.canonical_mesh()
    deformed = mesh.with_vertices(fam.deform(mesh.vertices, None, t)[0])
    points = make_rng(8).uniform(-1.0, 1.0, (400, 3))
    sdf = fam.signed_distance(points, t)
    clear = np.abs(sdf) > 0.05
    np.testing.assert_array_equal(
        fam.occupancy(points[clear], t), occupancy(deformed, points[clear])
    )


def test_band_smooths_occupancy():
    fam = random_family("pulsing-ellipsoid", make_rng(0))
    hard = fam.occupancy(np.zeros((1, 3)), 0.0)
    soft = fam.occupancy(np.zeros((1, 3)), 0.0, band=0.01)
    assert hard[0] == 1.0
    assert soft[0] == 1.0
    far = fam.occupancy(np.array([[0.95, 0.95, 0.95]]), 0.0, band=0.01)
    assert far[0] == 0.0


def test_parameter_validation():
    """Unknown kinds, missing parameters and out-of-range values are rejected"""
    with pytest.raises(GeometryError):
        random_family("spinning-top", make_rng(0))
    with pytest.raises(GeometryError):
        AnimationFamily("bending-bar", {"length": 1.2})
    params = random_family("bending-bar", make_rng(0)).params
    with pytest.raises(GeometryError):
        AnimationFamily("bending-bar", {**params, "length": 5.0})


def test_family_serialization_keeps_key():
    fam = random_family("two-link-arm", make_rng(4), mesh_detail=1)
    again = AnimationFamily.from_dict(fam.to_dict())
    assert again.key() == fam.key()
    assert again.mesh_detail == 1


def test_cond_descriptor_layout():
    """One-hot family block, pose slots and time features"""
    fam = random_family("orbiting-pair", make_rng(2))
    steps = make_framesteps(5, 0.1)
    cond = cond_descriptor(fam, steps)
    assert cond.shape == (5, COND_DIM)
    np.testing.assert_array_equal(cond[:, :4], np.tile([0, 0, 0, 1], (5, 1)))
    np.testing.assert_allclose(cond[:, 20], np.sin(2 * np.pi * steps))
    np.testing.assert_allclose(steps, [0.0, 0.1, 0.2, 0.3, 0.4])


def test_make_animation_needs_two_frames():
    with pytest.raises(GeometryError):
        make_animation(random_family("bending-bar", make_rng(0)), 1, seed=0)
