"""Chamfer-based evaluation of animated meshes: CD-3D, CD-4D and the motion Chamfer CD-M.

All distances are squared Euclidean distances in 64-bit. Nearest neighbours are
exact; ties resolve to the lowest index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from tempomesh.config import EvalConfig
from tempomesh.errors import GeometryError, ShapeError
from tempomesh.geometry import AnimatedMesh, MeshSequence, TriMesh, sample_surface, sample_surface_tracked
from tempomesh.layers import AdamW
from tempomesh.numerics import (
    CHECK_DTYPE,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    cos,
    div,
    getitem,
    make_rng,
    matmul,
    mean,
    mul,
    reshape,
    sin,
    sqrt,
    square,
    sub,
    transpose,
    tsum,
)

SCHEMA_VERSION = 1
BRUTE_FORCE_LIMIT = 1 << 20
KD_CANDIDATES = 8

Animation = Union[AnimatedMesh, MeshSequence]

# so(3) generators: K = sum_a w_a * _GENERATORS[a]
_GENERATORS = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=CHECK_DTYPE,
)


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula on a plain array."""
    w = np.asarray(w, dtype=np.float64)
    theta = math.sqrt(float(w @ w) + 1e-12)
    k = np.tensordot(w, _GENERATORS, axes=1)
    return np.eye(3) + math.sin(theta) / theta * k + (1.0 - math.cos(theta)) / theta**2 * (k @ k)


def matrix_to_axis_angle(rotation: np.ndarray) -> np.ndarray:
    angle = math.acos(float(np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)))
    if angle < 1e-12:
        return np.zeros(3)
    if math.pi - angle < 1e-6:
        # Axis from the symmetric part when sin(angle) vanishes.
        b = (rotation + np.eye(3)) / 2.0
        axis = b[int(np.argmax(np.diag(b)))]
        return angle * axis / np.linalg.norm(axis)
    axis = np.array([rotation[2, 1] - rotation[1, 2], rotation[0, 2] - rotation[2, 0], rotation[1, 0] - rotation[0, 1]])
    return angle * axis / (2.0 * math.sin(angle))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (proper, orthonormal) followed by a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6) or np.linalg.det(rotation) <= 0:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def angle(self) -> float:
        """Rotation angle in radians."""
        return math.acos(float(np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.rotation.reshape(-1)] + [float(v) for v in self.translation]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "RigidTransform":
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])


def apply_to_animation(anim: Animation, transform: RigidTransform) -> Animation:
    """The same rigid transform applied to every frame."""
    if isinstance(anim, AnimatedMesh):
        moved = anim.vertices @ transform.rotation.T + transform.translation
        return AnimatedMesh(anim.faces, anim.framesteps, moved)
    return MeshSequence(anim.framesteps, [m.with_vertices(transform.apply(m.vertices)) for m in anim.meshes])


# Nearest neighbours


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(len(a), len(b))`` squared distances, summed coordinate by coordinate."""
    d = a[:, None, :] - b[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _closest_candidates(query: np.ndarray, points: np.ndarray, candidates: np.ndarray):
    diff = query[:, None, :] - points[candidates]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    nearest = d2.min(axis=1)
    idx = np.where(d2 == nearest[:, None], candidates, len(points)).min(axis=1)
    # every candidate at the minimum: more tied points may lie outside the set
    saturated = d2.max(axis=1) <= nearest
    return nearest, idx, saturated


def nearest_neighbors(query: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest point of ``points`` for every query point.

    Small problems are solved by brute force. Larger ones take ``KD_CANDIDATES``
    candidates from a k-d tree and recompute their distances exactly; a query
    whose candidates all tie is asked again with twice as many, so ties still go
    to the lowest index.

    Returns:
        tuple: Squared distances and indices, both of length ``len(query)``.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(query) == 0 or len(points) == 0:
        raise GeometryError("nearest neighbours need two non-empty point sets")
    if len(query) * len(points) <= BRUTE_FORCE_LIMIT:
        d2 = squared_distances(query, points)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(len(query)), idx], idx

    tree = cKDTree(points)
    rows = np.arange(len(query))
    nearest = np.empty(len(query))
    idx = np.empty(len(query), dtype=np.int64)
    k = min(KD_CANDIDATES, len(points))
    while len(rows):
        _, candidates = tree.query(query[rows], k=k)
        candidates = np.asarray(candidates).reshape(len(rows), k)
        nearest[rows], idx[rows], saturated = _closest_candidates(query[rows], points, candidates)
        if k == len(points):
            break
        rows = rows[saturated]
        k = min(2 * k, len(points))
    return nearest, idx


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: the two directed mean squared nearest distances, summed.

    Raises:
        GeometryError: If either set is empty.
    """
    d_ab, _ = nearest_neighbors(a, b)
    d_ba, _ = nearest_neighbors(b, a)
    return float(np.mean(d_ab) + np.mean(d_ba))


def motion_chamfer(gt_points: np.ndarray, pred_points: np.ndarray) -> float:
    """Chamfer with correspondences fixed at the first frame and kept for every frame.

    Args:
        gt_points: ``(N, P, 3)`` tracked samples of the ground truth.
        pred_points: ``(N, P', 3)`` tracked samples of the prediction.
    """
    gt_points = np.asarray(gt_points, dtype=np.float64)
    pred_points = np.asarray(pred_points, dtype=np.float64)
    if gt_points.ndim != 3 or pred_points.ndim != 3 or len(gt_points) != len(pred_points):
        raise ShapeError(f"motion chamfer needs (N, P, 3) arrays, got {gt_points.shape} and {pred_points.shape}")
    _, sigma = nearest_neighbors(gt_points[0], pred_points[0])
    _, tau = nearest_neighbors(pred_points[0], gt_points[0])
    forward = gt_points - pred_points[:, sigma]
    backward_ = gt_points[:, tau] - pred_points
    a = forward[..., 0] * forward[..., 0] + forward[..., 1] * forward[..., 1] + forward[..., 2] * forward[..., 2]
    b = (
        backward_[..., 0] * backward_[..., 0]
        + backward_[..., 1] * backward_[..., 1]
        + backward_[..., 2] * backward_[..., 2]
    )
    return float(np.mean(a) + np.mean(b))


# Alignment


@dataclass(frozen=True)
class IcpOptions:
    points: int = 1024
    iterations: int = 200
    lr: float = 1e-2
    restarts: int = 4
    refine_steps: int = 20
    seed: int = 0

    @classmethod
    def from_config(cls, config: EvalConfig) -> "IcpOptions":
        return cls(
            points=config.icp_points,
            iterations=config.icp_iterations,
            lr=config.icp_lr,
            restarts=config.icp_restarts,
            refine_steps=config.icp_refine_steps,
            seed=config.seed,
        )


def _subsample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) <= n:
        return points
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def _rotation_tensor(w: Tensor) -> Tensor:
    theta = sqrt(add(tsum(square(w)), 1e-12))
    k = tsum(mul(reshape(w, (3, 1, 1)), _GENERATORS), axis=0)
    a = div(sin(theta), theta)
    b = div(sub(1.0, cos(theta)), square(theta))
    return add(add(np.eye(3), mul(a, k)), mul(b, matmul(k, k)))


def _chamfer_loss(src: np.ndarray, dst: np.ndarray, w: Tensor, t: Tensor) -> Tensor:
    moved = add(matmul(as_tensor(src, CHECK_DTYPE), transpose(_rotation_tensor(w))), t)
    _, fwd = nearest_neighbors(moved.data, dst)
    _, bwd = nearest_neighbors(dst, moved.data)
    forward = mean(tsum(square(sub(moved, dst[fwd])), axis=-1))
    backward_ = mean(tsum(square(sub(getitem(moved, bwd), dst)), axis=-1))
    return add(forward, backward_)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, mu_d - rotation @ mu_s)


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _descend(src: np.ndarray, dst: np.ndarray, init: RigidTransform, options: IcpOptions) -> RigidTransform:
    w = Tensor(matrix_to_axis_angle(init.rotation), requires_grad=True, dtype=CHECK_DTYPE)
    t = Tensor(init.translation.copy(), requires_grad=True, dtype=CHECK_DTYPE)
    optimizer = AdamW(
        {"w": w, "t": t},
        lr=options.lr,
        weight_decay=0.0,
        max_grad_norm=None,
        total_steps=options.iterations,
    )
    for _ in range(options.iterations):
        with Tape() as tape:
            loss = _chamfer_loss(src, dst, w, t)
        optimizer.step(backward(tape, loss, wrt=[w, t]))
    return RigidTransform(_orthonormalize(axis_angle_to_matrix(w.data)), t.data)


def _refine(src: np.ndarray, dst: np.ndarray, transform: RigidTransform, steps: int) -> RigidTransform:
    best, best_loss = transform, chamfer(transform.apply(src), dst)
    for _ in range(steps):
        _, idx = nearest_neighbors(best.apply(src), dst)
        candidate = _kabsch(src, dst[idx])
        loss = chamfer(candidate.apply(src), dst)
        if not loss < best_loss:
            break
        best, best_loss = candidate, loss
    return best


def icp_align(src: np.ndarray, dst: np.ndarray, options: Optional[IcpOptions] = None) -> RigidTransform:
    """Rigid transform moving ``src`` onto ``dst`` by gradient descent on the Chamfer distance.

    Descent runs from ``options.restarts`` yaw initialisations about the z axis,
    each with the centroids matched, and every result is refined by closest-point
    Kabsch steps that are kept only while the Chamfer distance drops. The best
    candidate wins; the identity is a candidate too, so alignment never ends worse
    than no alignment.

    Raises:
        GeometryError: If either set has fewer than four points.
    """
    options = options or IcpOptions()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 4 or len(dst) < 4:
        raise GeometryError(f"ICP needs at least 4 points per set, got {len(src)} and {len(dst)}")

    spread = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1e-300):
        logger.warning(f"ICP [DEGENERATE] | collinear source of {len(src)} points | returning identity")
        return RigidTransform.identity()

    rng = make_rng(options.seed)
    src_s = _subsample(src, options.points, rng)
    dst_s = _subsample(dst, options.points, rng)

    best = RigidTransform.identity()
    best_loss = chamfer(src_s, dst_s)
    for r in range(options.restarts):
        rotation = _rot_z(2.0 * math.pi * r / options.restarts)
        init = RigidTransform(rotation, dst_s.mean(axis=0) - rotation @ src_s.mean(axis=0))
        candidate = _refine(src_s, dst_s, _descend(src_s, dst_s, init, options), options.refine_steps)
        loss = chamfer(candidate.apply(src_s), dst_s)
        if loss < best_loss:
            best, best_loss = candidate, loss
    logger.debug(f"ICP [DONE] | chamfer: {best_loss:.6g} | angle: {math.degrees(best.angle):.2f}")
    return best


# Sequence metrics


def _frames(anim: Animation) -> list[TriMesh]:
    return list(anim.frames())


def _check_lengths(gt: Animation, pred: Animation) -> None:
    if len(gt) != len(pred):
        raise ShapeError(f"frame counts differ: ground truth {len(gt)}, prediction {len(pred)}")


def _frame_samples(anim: Animation, n_points: int, seed: int) -> list[np.ndarray]:
    return [sample_surface(mesh, n_points, seed + k).positions for k, mesh in enumerate(_frames(anim))]


@dataclass
class SequenceScores:
    value: float
    per_frame: list[float]
    transforms: list[RigidTransform]


def cd3d_scores(gt: Animation, pred: Animation, n_points: int, seed: int, options: Optional[IcpOptions] = None):
    """CD-3D with its per-frame values and the per-frame alignments."""
    _check_lengths(gt, pred)
    gt_s = _frame_samples(gt, n_points, seed)
    pred_s = _frame_samples(pred, n_points, seed)
    transforms = [icp_align(p, g, options) for p, g in zip(pred_s, gt_s)]
    per_frame = [chamfer(tf.apply(p), g) for tf, p, g in zip(transforms, pred_s, gt_s)]
    return SequenceScores(float(np.mean(per_frame)), per_frame, transforms)


def cd4d_scores(gt: Animation, pred: Animation, n_points: int, seed: int, options: Optional[IcpOptions] = None):
    """CD-4D with its per-frame values and the single first-frame alignment."""
    _check_lengths(gt, pred)
    gt_s = _frame_samples(gt, n_points, seed)
    pred_s = _frame_samples(pred, n_points, seed)
    transform = icp_align(pred_s[0], gt_s[0], options)
    per_frame = [chamfer(transform.apply(p), g) for p, g in zip(pred_s, gt_s)]
    return SequenceScores(float(np.mean(per_frame)), per_frame, [transform])


def cd3d(gt: Animation, pred: Animation, n_points: int, seed: int, options: Optional[IcpOptions] = None) -> float:
    """Per-frame Chamfer after a per-frame rigid alignment, averaged over frames.

    Both sequences are sampled with the same seeds.

    Raises:
        ShapeError: If the frame counts differ.
    """
    return cd3d_scores(gt, pred, n_points, seed, options).value


def cd4d(gt: Animation, pred: Animation, n_points: int, seed: int, options: Optional[IcpOptions] = None) -> float:
    """Per-frame Chamfer after one rigid alignment estimated on the first frame."""
    return cd4d_scores(gt, pred, n_points, seed, options).value


def cdm(
    gt: AnimatedMesh,
    pred: AnimatedMesh,
    n_points: int,
    seed: int,
    options: Optional[IcpOptions] = None,
    transform: Optional[RigidTransform] = None,
) -> float:
    """Motion Chamfer on tracked surface samples after the first-frame alignment.

    Args:
        transform: First-frame alignment to reuse; estimated when None.

    Raises:
        GeometryError: If either sequence has no shared topology.
        ShapeError: If the frame counts differ.
    """
    if not isinstance(gt, AnimatedMesh) or not isinstance(pred, AnimatedMesh):
        raise GeometryError("CD-M needs shared-topology animations on both sides")
    _check_lengths(gt, pred)
    gt_t = np.stack([c.positions for c in sample_surface_tracked(gt, n_points, seed)])
    pred_t = np.stack([c.positions for c in sample_surface_tracked(pred, n_points, seed)])
    if transform is None:
        transform = icp_align(pred_t[0], gt_t[0], options)
    return motion_chamfer(gt_t, pred_t @ transform.rotation.T + transform.translation)


def noise_floor(gt: Animation, n_points: int, seeds: tuple[int, int] = (0, 1)) -> float:
    """Mean per-frame Chamfer between two independent samplings of the same sequence."""
    a = _frame_samples(gt, n_points, seeds[0])
    b = _frame_samples(gt, n_points, seeds[1])
    return float(np.mean([chamfer(x, y) for x, y in zip(a, b)]))


# Reports


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return json.dumps(value)
    return str(value)


def _parse_value(text: str) -> Any:
    text = text.strip()
    if text == "none":
        return None
    if text.startswith("["):
        return json.loads(text)
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass
class MetricsReport:
    """Scores of one scene under one method, with the protocol needed to recompute them."""

    scene_id: str
    method: str
    cd3d: Optional[float]
    cd4d: Optional[float]
    cdm: Optional[float]
    n_points: int
    seed: int
    icp_iterations: int
    icp_restarts: int
    noise_floor: Optional[float] = None
    per_frame_cd3d: list[float] = field(default_factory=list)
    per_frame_cd4d: list[float] = field(default_factory=list)
    icp3d_transforms: list[list[float]] = field(default_factory=list)
    icp4d_transform: list[float] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    _ORDER = (
        "schema_version",
        "scene_id",
        "method",
        "n_points",
        "seed",
        "icp_iterations",
        "icp_restarts",
        "cd3d",
        "cd4d",
        "cdm",
        "noise_floor",
        "per_frame_cd3d",
        "per_frame_cd4d",
        "icp3d_transforms",
        "icp4d_transform",
    )

    def to_text(self) -> str:
        """``key: value`` lines; lists in brackets; timings as ``timing.<stage>`` keys."""
        lines = [f"{key}: {_format_value(getattr(self, key))}" for key in self._ORDER]
        lines += [f"timing.{stage}: {_format_value(float(seconds))}" for stage, seconds in sorted(self.timings.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        """Parse :meth:`to_text` output.

        Raises:
            ValueError: On a malformed line or an unsupported schema version.
        """
        values: dict[str, Any] = {}
        timings: dict[str, float] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, raw = line.partition(":")
            if not sep:
                raise ValueError(f"line {number} is not 'key: value': {line!r}")
            key = key.strip()
            if key.startswith("timing."):
                timings[key[len("timing.") :]] = float(raw)
            elif key in ("scene_id", "method"):
                values[key] = raw.strip()
            else:
                values[key] = _parse_value(raw)
        version = values.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema version {version!r}")
        for key in ("cd3d", "cd4d", "cdm", "noise_floor"):
            if values.get(key) is not None:
                values[key] = float(values[key])
        return cls(timings=timings, **{k: v for k, v in values.items() if k in cls._ORDER})


@dataclass
class AggregateReport:
    """Mean scores of one method over the scenes that did not fail."""

    method: str
    n_scenes: int
    cd3d: Optional[float]
    cd4d: Optional[float]
    cdm: Optional[float]
    failed: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"schema_version: {SCHEMA_VERSION}",
            f"method: {self.method}",
            f"n_scenes: {self.n_scenes}",
            f"n_failed: {len(self.failed)}",
            f"cd3d: {_format_value(self.cd3d)}",
            f"cd4d: {_format_value(self.cd4d)}",
            f"cdm: {_format_value(self.cdm)}",
        ]
        lines += [f"failed.{scene}: {reason}" for scene, reason in sorted(self.failed.items())]
        return "\n".join(lines) + "\n"


def _mean_of(values: list[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def aggregate_reports(
    reports: Sequence[MetricsReport], failed: Optional[dict[str, str]] = None, method: Optional[str] = None
) -> AggregateReport:
    """Average the scenes of one method; failed scenes are only counted."""
    method = method or (reports[0].method if reports else "unknown")
    return AggregateReport(
        method=method,
        n_scenes=len(reports),
        cd3d=_mean_of([r.cd3d for r in reports]),
        cd4d=_mean_of([r.cd4d for r in reports]),
        cdm=_mean_of([r.cdm for r in reports]),
        failed=dict(failed or {}),
    )


def score_scene(
    scene_id: str,
    method: str,
    gt: AnimatedMesh,
    pred: Animation,
    config: EvalConfig,
    timings: Optional[dict[str, float]] = None,
    gt_surface: Optional[Animation] = None,
) -> MetricsReport:
    """All three metrics of one prediction; CD-M only when the prediction shares one topology.

    ``gt_surface`` replaces the ground truth for CD-3D and CD-4D, e.g. its watertight
    remesh; CD-M always tracks samples on ``gt``.
    """
    options = IcpOptions.from_config(config)
    surface = gt if gt_surface is None else gt_surface
    s3 = cd3d_scores(surface, pred, config.n_points, config.seed, options)
    s4 = cd4d_scores(surface, pred, config.n_points, config.seed, options)
    motion = None
    if isinstance(pred, AnimatedMesh):
        motion = cdm(gt, pred, config.n_points, config.seed, options)
    report = MetricsReport(
        scene_id=scene_id,
        method=method,
        cd3d=s3.value,
        cd4d=s4.value,
        cdm=motion,
        n_points=config.n_points,
        seed=config.seed,
        icp_iterations=config.icp_iterations,
        icp_restarts=config.icp_restarts,
        noise_floor=noise_floor(gt, config.n_points, (config.seed, config.seed + 1)),
        per_frame_cd3d=s3.per_frame,
        per_frame_cd4d=s4.per_frame,
        icp3d_transforms=[tf.to_list() for tf in s3.transforms],
        icp4d_transform=s4.transforms[0].to_list(),
        timings=dict(timings or {}),
    )
    logger.info(
        f"EVAL [SCENE] | scene: {scene_id} | method: {method} | cd3d: {report.cd3d:.5g} | "
        f"cd4d: {report.cd4d:.5g} | cdm: {report.cdm}"
    )
    return report
