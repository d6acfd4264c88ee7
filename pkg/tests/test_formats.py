import numpy as np
import pytest

from tempomesh.errors import GeometryError
from tempomesh.formats import (
    read_animation,
    read_descriptor,
    read_obj,
    read_point_cloud,
    write_animation,
    write_descriptor,
    write_obj,
    write_point_cloud,
)
from tempomesh.geometry import AnimatedMesh, MeshSequence, TriMesh, box_mesh, icosphere, sample_surface


def test_point_cloud_file(temp_dir):
    """Point clouds keep float32 precision and reject foreign or truncated files"""
    cloud = sample_surface(icosphere(1), 50, seed=0)
    path = write_point_cloud(temp_dir / "c.pc", cloud)
    back = read_point_cloud(path)
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-6)

    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(GeometryError, match="truncated"):
        read_point_cloud(path)
    (temp_dir / "x.pc").write_bytes(b"JUNK" + b"\0" * 20)
    with pytest.raises(GeometryError):
        read_point_cloud(temp_dir / "x.pc")


def test_obj_file(temp_dir):
    mesh = box_mesh((1.0, 2.0, 3.0), (2, 1, 1))
    back = read_obj(write_obj(temp_dir / "box.obj", mesh))
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-8)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_obj_polygons_are_fanned(temp_dir):
    (temp_dir / "quad.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    mesh = read_obj(temp_dir / "quad.obj")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])


def test_shared_topology_animation(temp_dir):
    """An animated mesh comes back with one face array"""
    sphere = icosphere(1)
    anim = AnimatedMesh(sphere.faces, [0.0, 0.5], np.stack([sphere.vertices, sphere.vertices * 0.5]))
    manifest = write_animation(temp_dir / "anim", anim)
    assert manifest.name == "animation.manifest"
    assert (temp_dir / "anim" / "frame_0001.obj").exists()
    back = read_animation(manifest)
    assert isinstance(back, AnimatedMesh)
    np.testing.assert_allclose(back.vertices, anim.vertices, rtol=1e-8)
    np.testing.assert_allclose(back.framesteps, [0.0, 0.5])


def test_mesh_sequence_animation(temp_dir):
    """Independent meshes stay a sequence; a fixed topology is enforced on request"""
    seq = MeshSequence([0.0, 1.0], [icosphere(1), TriMesh.empty()])
    back = read_animation(write_animation(temp_dir / "seq", seq, prefix="x_", manifest_name="seq.manifest"))
    assert isinstance(back, MeshSequence)
    assert back.frame(1).is_empty
    assert back.frame(1).flags == ("empty",)
    with pytest.raises(GeometryError):
        write_animation(temp_dir / "bad", seq, fixed_topology=True)


def test_descriptor_file(temp_dir):
    payload = {"b": [1.0, 2.0], "a": {"kind": "bending-bar"}}
    path = write_descriptor(temp_dir / "cond.json", payload)
    assert read_descriptor(path) == payload
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
