import math

import numpy as np
import pytest

from tempomesh.errors import GeometryError, ShapeError
from tempomesh.geometry import AnimatedMesh, MeshSequence, box_mesh, icosphere, sample_surface_tracked
from tempomesh.metrics import (
    BRUTE_FORCE_LIMIT,
    IcpOptions,
    MetricsReport,
    RigidTransform,
    aggregate_reports,
    axis_angle_to_matrix,
    cd3d,
    cd4d,
    cdm,
    chamfer,
    icp_align,
    motion_chamfer,
    nearest_neighbors,
    noise_floor,
    score_scene,
    squared_distances,
)

FAST_ICP = IcpOptions(points=1024, iterations=3, restarts=1, refine_steps=3)


@pytest.fixture
def sphere_anim():
    """A sphere that grows over three frames."""
    sphere = icosphere(1, 0.5)
    vertices = np.stack([sphere.vertices * s for s in (1.0, 1.1, 1.2)])
    return AnimatedMesh(sphere.faces, [0.0, 0.1, 0.2], vertices)


def _translated(anim, offset):
    return AnimatedMesh(anim.faces, anim.framesteps, anim.vertices + np.asarray(offset))


def _grid(spacing=1.0):
    axis = np.arange(4) * spacing
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def test_nearest_neighbors_match_brute_force(rng):
    """The k-d tree path returns the brute-force answer"""
    points = rng.uniform(-1, 1, (1100, 3))
    query = rng.uniform(-1, 1, (1000, 3))
    assert len(points) * len(query) > BRUTE_FORCE_LIMIT
    d2, idx = nearest_neighbors(query, points)
    expected = np.concatenate([squared_distances(q, points) for q in np.array_split(query, 10)])
    np.testing.assert_array_equal(idx, np.argmin(expected, axis=1))
    np.testing.assert_allclose(d2, expected.min(axis=1), rtol=1e-12)


def test_nearest_neighbors_ties_take_lowest_index():
    points = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    _, idx = nearest_neighbors(np.zeros((1, 3)), points)
    assert idx[0] == 0
    with pytest.raises(GeometryError):
        nearest_neighbors(np.zeros((0, 3)), points)


def test_nearest_neighbors_tree_ties_beyond_candidates(monkeypatch):
    """More equidistant points than the tree is first asked for still resolve to the lowest index"""
    monkeypatch.setattr("tempomesh.metrics.BRUTE_FORCE_LIMIT", 0)
    axes = np.concatenate([np.eye(3), -np.eye(3)])
    far = np.full((5, 3), 4.0)
    points = np.concatenate([far, axes, axes[::-1], axes, far * 2.0])
    query = np.array([[0.0, 0.0, 0.0], [3.9, 4.0, 4.0]])
    d2, idx = nearest_neighbors(query, points)
    np.testing.assert_array_equal(idx, [5, 0])
    np.testing.assert_allclose(d2, [1.0, 0.01])


def test_chamfer_values():
    """Zero on identical sets and twice the squared shift for a small offset"""
    grid = _grid()
    assert chamfer(grid, grid) == 0.0
    assert chamfer(grid, grid + [0.1, 0.0, 0.0]) == pytest.approx(0.02)
    assert chamfer(grid, grid[::-1]) == 0.0


def _directed_mean(a, b):
    return np.mean([min(float(np.sum((p - q) ** 2)) for q in b) for p in a])


def test_chamfer_matches_pairwise_loops(rng):
    a = rng.normal(size=(64, 3))
    b = rng.normal(size=(50, 3)) + 0.3
    expected = _directed_mean(a, b) + _directed_mean(b, a)
    assert chamfer(a, b) == pytest.approx(expected, rel=1e-12)


def test_motion_chamfer():
    """Correspondences fixed at frame 0 expose motion a plain chamfer would miss"""
    grid = _grid()
    gt = np.stack([grid, grid])
    assert motion_chamfer(gt, gt) == 0.0
    # swapped points per frame look identical to a plain chamfer
    shuffled = np.stack([grid, grid[::-1]])
    assert chamfer(shuffled[1], gt[1]) == 0.0
    assert motion_chamfer(gt, shuffled) > 0.0
    moved = np.stack([grid, grid + [0.0, 0.0, 0.2]])
    assert motion_chamfer(gt, moved) == pytest.approx(0.04)
    with pytest.raises(ShapeError):
        motion_chamfer(gt, moved[:1])


def _motion_chamfer_loops(gt, pred):
    n, p = gt.shape[:2]
    sigma = [int(np.argmin([np.sum((gt[0, i] - pred[0, j]) ** 2) for j in range(p)])) for i in range(p)]
    tau = [int(np.argmin([np.sum((pred[0, j] - gt[0, i]) ** 2) for i in range(p)])) for j in range(p)]
    forward = [np.sum((gt[k, i] - pred[k, sigma[i]]) ** 2) for k in range(n) for i in range(p)]
    backward = [np.sum((gt[k, tau[j]] - pred[k, j]) ** 2) for k in range(n) for j in range(p)]
    return float(np.mean(forward) + np.mean(backward))


def test_motion_chamfer_matches_pairwise_loops(rng):
    gt = rng.normal(size=(4, 32, 3))
    pred = gt + rng.normal(scale=0.3, size=(4, 32, 3))
    assert motion_chamfer(gt, pred) == pytest.approx(_motion_chamfer_loops(gt, pred), rel=1e-12)


def test_cdm_matches_pairwise_loops(rng):
    """CD-M on tracked samples equals the loop form once the alignment is fixed"""
    sphere = icosphere(1, 0.5)
    gt = AnimatedMesh(sphere.faces, [0.0, 0.1, 0.2, 0.3], sphere.vertices + rng.normal(scale=0.05, size=(4, 42, 3)))
    pred = AnimatedMesh(sphere.faces, gt.framesteps, gt.vertices + rng.normal(scale=0.05, size=(4, 42, 3)))
    gt_t = np.stack([c.positions for c in sample_surface_tracked(gt, 32, 5)])
    pred_t = np.stack([c.positions for c in sample_surface_tracked(pred, 32, 5)])
    value = cdm(gt, pred, 32, seed=5, transform=RigidTransform.identity())
    assert value == pytest.approx(_motion_chamfer_loops(gt_t, pred_t), rel=1e-12)


def test_cdm_of_a_frozen_prediction():
    """A prediction stuck at frame 0 scores twice the mean squared displacement of the ground truth"""
    sphere = icosphere(1, 0.5)
    shifts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
    gt = AnimatedMesh(sphere.faces, [0.0, 0.1, 0.2, 0.3], sphere.vertices[None] + shifts[:, None])
    frozen = AnimatedMesh(sphere.faces, gt.framesteps, np.repeat(sphere.vertices[None], 4, axis=0))
    assert cdm(gt, frozen, 200, seed=0, options=FAST_ICP) == pytest.approx(0.07, rel=1e-9)


def test_rigid_transform_algebra():
    rotation = axis_angle_to_matrix(np.array([0.0, 0.0, math.pi / 3]))
    tf = RigidTransform(rotation, [1.0, 2.0, 3.0])
    assert tf.angle == pytest.approx(math.pi / 3)
    both = tf.compose(tf.inverse())
    np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(both.translation, 0.0, atol=1e-12)
    again = RigidTransform.from_list(tf.to_list())
    np.testing.assert_array_equal(again.rotation, tf.rotation)
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ShapeError):
        RigidTransform(np.eye(2), np.zeros(3))


def test_icp_recovers_translation():
    """A pure translation is undone exactly"""
    dst = icosphere(2, 0.5).vertices
    src = dst - [0.3, -0.1, 0.2]
    tf = icp_align(src, dst, FAST_ICP)
    assert chamfer(tf.apply(src), dst) < 1e-10
    np.testing.assert_allclose(tf.translation, [0.3, -0.1, 0.2], atol=1e-6)


def test_icp_never_worse_than_identity(rng):
    src = rng.uniform(-1, 1, (80, 3))
    dst = rng.uniform(-1, 1, (90, 3))
    tf = icp_align(src, dst, FAST_ICP)
    assert chamfer(tf.apply(src), dst) <= chamfer(src, dst)
    same = icp_align(src, src, FAST_ICP)
    np.testing.assert_array_equal(same.rotation, np.eye(3))


def test_icp_degenerate_inputs():
    """Collinear sources give the identity; tiny sets are rejected"""
    line = np.outer(np.linspace(0, 1, 10), [1.0, 0.0, 0.0])
    tf = icp_align(line, line + 1.0, FAST_ICP)
    np.testing.assert_array_equal(tf.rotation, np.eye(3))
    np.testing.assert_array_equal(tf.translation, np.zeros(3))
    with pytest.raises(GeometryError):
        icp_align(line[:3], line, FAST_ICP)


def test_icp_recovers_rotation_and_translation(rng):
    """An off-axis rotation plus a shift is undone to within two degrees and a centimetre"""
    src = rng.uniform(-1, 1, (400, 3)) * [1.0, 0.6, 0.3]
    axis = np.array([0.3, -0.2, 1.0])
    rotation = axis_angle_to_matrix(0.4 * axis / np.linalg.norm(axis))
    shift = np.array([0.2, -0.1, 0.3])
    dst = src @ rotation.T + shift
    tf = icp_align(src, dst, IcpOptions(points=1024, iterations=50, restarts=4, refine_steps=50))
    error = RigidTransform(rotation, shift).inverse().compose(tf)
    assert math.degrees(error.angle) < 2.0
    assert np.linalg.norm(tf.translation - shift) < 0.01


def test_sequence_metrics_on_identical_animations(sphere_anim):
    assert cd3d(sphere_anim, sphere_anim, 100, seed=0, options=FAST_ICP) == 0.0
    assert cd4d(sphere_anim, sphere_anim, 100, seed=0, options=FAST_ICP) == 0.0
    assert cdm(sphere_anim, sphere_anim, 100, seed=0, options=FAST_ICP) == 0.0


def test_rigid_offset_is_aligned_away(sphere_anim):
    """A translated prediction scores near zero once aligned"""
    pred = _translated(sphere_anim, [0.2, 0.0, -0.1])
    assert cd4d(sphere_anim, pred, 100, seed=0, options=FAST_ICP) < 1e-8
    assert cdm(sphere_anim, pred, 100, seed=0, options=FAST_ICP) < 1e-8


def test_sequence_metric_errors(sphere_anim):
    """Frame counts must agree and CD-M needs a shared topology"""
    short = AnimatedMesh(sphere_anim.faces, [0.0, 0.1], sphere_anim.vertices[:2])
    with pytest.raises(ShapeError):
        cd3d(sphere_anim, short, 50, seed=0, options=FAST_ICP)
    sequence = MeshSequence(sphere_anim.framesteps, list(sphere_anim.frames()))
    with pytest.raises(GeometryError):
        cdm(sphere_anim, sequence, 50, seed=0)


def _box_anim(n_frames=4):
    box = box_mesh((1.0, 0.5, 0.25), (2, 2, 2))
    return AnimatedMesh(box.faces, np.arange(n_frames) * 0.1, np.repeat(box.vertices[None], n_frames, axis=0))


def test_cd4d_penalises_per_frame_rotations(rng):
    """Rotating frames independently is forgiven by CD-3D but not by CD-4D"""
    gt = _box_anim()
    rotations = [np.eye(3)] + [axis_angle_to_matrix(rng.normal(size=3) * 0.3) for _ in range(3)]
    pred = AnimatedMesh(gt.faces, gt.framesteps, np.stack([v @ r.T for v, r in zip(gt.vertices, rotations)]))
    options = IcpOptions(points=1024, iterations=20, restarts=4, refine_steps=20)
    assert cd4d(gt, pred, 300, seed=0, options=options) > cd3d(gt, pred, 300, seed=0, options=options)


def test_cd3d_sees_scale():
    """No rigid alignment can undo a uniform scale"""
    gt = _box_anim()
    bigger = AnimatedMesh(gt.faces, gt.framesteps, gt.vertices * 1.2)
    assert cd3d(gt, gt, 200, seed=0, options=FAST_ICP) == 0.0
    assert cd3d(gt, bigger, 200, seed=0, options=FAST_ICP) > 1e-4


def test_noise_floor_is_positive(sphere_anim):
    assert noise_floor(sphere_anim, 100) > 0.0


def test_score_scene_report(sphere_anim, tiny_config):
    """Scores, per-frame values and alignments land in one report that survives text"""
    config = tiny_config.replace_section("eval", icp_points=256).eval
    report = score_scene("abc123", "ours", sphere_anim, sphere_anim, config, timings={"infer": 1.5})
    assert report.cd3d == 0.0
    assert report.cdm == 0.0
    assert len(report.per_frame_cd3d) == 3
    assert len(report.icp3d_transforms) == 3
    assert report.noise_floor > 0.0

    back = MetricsReport.from_text(report.to_text())
    assert back == report
    assert back.timings == {"infer": 1.5}

    sequence = MeshSequence(sphere_anim.framesteps, list(sphere_anim.frames()))
    no_motion = score_scene("abc123", "per-frame", sphere_anim, sequence, config)
    assert no_motion.cdm is None
    assert "cdm: none" in no_motion.to_text()


def test_report_parse_errors():
    with pytest.raises(ValueError, match="schema"):
        MetricsReport.from_text("schema_version: 99\nscene_id: x\n")
    with pytest.raises(ValueError, match="line 1"):
        MetricsReport.from_text("not a key value line\n")


def test_aggregate_reports():
    """Means skip missing values and failed scenes are listed"""

    def report(sid, value, motion):
        return MetricsReport(sid, "ours", value, value, motion, 64, 0, 5, 1)

    agg = aggregate_reports([report("a", 1.0, None), report("b", 3.0, 2.0)], failed={"c": "extraction failed"})
    assert agg.n_scenes == 2
    assert agg.cd3d == pytest.approx(2.0)
    assert agg.cdm == pytest.approx(2.0)
    text = agg.to_text()
    assert "n_failed: 1" in text
    assert "failed.c: extraction failed" in text
    empty = aggregate_reports([], method="ours")
    assert empty.cd3d is None
