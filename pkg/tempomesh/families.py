"""Procedural animation families with analytic deformations and occupancy.

Every family deforms a canonical shape with a motion of the form
``A * (sin(2*pi*f*t + phase) - sin(phase))``, so the deformation at ``t = 0`` is
exactly the identity. Parameter ranges keep every shape inside 90% of the
``[-1, 1]^3`` cube for all framesteps.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tempomesh.errors import GeometryError
from tempomesh.geometry import (
    AnimatedMesh,
    SurfacePointCloud,
    TriMesh,
    box_mesh,
    icosphere,
    merge_meshes,
    sample_surface,
)

FAMILY_KINDS = ("pulsing-ellipsoid", "bending-bar", "two-link-arm", "orbiting-pair")
COND_DIM = 24
POSE_SLOTS = 16
DEFAULT_FRAME_SPACING = 1.0 / 15.0
ARM_GAP = 0.02

TWO_PI = 2.0 * math.pi

PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "pulsing-ellipsoid": {
        "radius_x": (0.2, 0.6),
        "radius_y": (0.2, 0.6),
        "radius_z": (0.2, 0.6),
        "amplitude_x": (0.0, 0.25),
        "amplitude_y": (0.0, 0.25),
        "amplitude_z": (0.0, 0.25),
        "frequency": (0.25, 2.0),
        "phase": (0.0, TWO_PI),
    },
    "bending-bar": {
        "length": (1.0, 1.6),
        "half_thickness": (0.06, 0.15),
        "max_bend": (0.0, 2.0),
        "frequency": (0.25, 2.0),
        "phase": (0.0, TWO_PI),
    },
    "two-link-arm": {
        "length_1": (0.35, 0.5),
        "length_2": (0.3, 0.45),
        "half_width": (0.06, 0.12),
        "shoulder_amplitude": (0.0, 0.6),
        "elbow_amplitude": (0.0, 1.2),
        "frequency": (0.25, 2.0),
        "phase": (0.0, TWO_PI),
    },
    "orbiting-pair": {
        "radius_a": (0.12, 0.25),
        "radius_b": (0.12, 0.25),
        "separation": (0.3, 0.5),
        "orbit_turns": (0.0, 1.0),
        "bob_amplitude": (0.0, 0.2),
        "frequency": (0.25, 2.0),
        "phase": (0.0, TWO_PI),
    },
}


def _motion(t, frequency: float, phase: float):
    return np.sin(TWO_PI * frequency * np.asarray(t, dtype=np.float64) + phase) - math.sin(phase)


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_sdf(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def _band(distance: np.ndarray, band: float) -> np.ndarray:
    if band <= 0:
        return (distance <= 0).astype(np.float64)
    return np.clip(0.5 - distance / (2.0 * band), 0.0, 1.0)


@dataclass
class AnimationFamily:
    """A parametric animated shape.

    Attributes:
        kind: One of :data:`FAMILY_KINDS`.
        params: Parameter values, see :data:`PARAM_RANGES`.
        mesh_detail: Subdivision level of the canonical mesh.
    """

    kind: str
    params: dict[str, float] = field(default_factory=dict)
    mesh_detail: int = 2

    def __post_init__(self):
        if self.kind not in PARAM_RANGES:
            raise GeometryError(f"unknown family kind: {self.kind}")
        ranges = PARAM_RANGES[self.kind]
        missing = sorted(set(ranges) - set(self.params))
        extra = sorted(set(self.params) - set(ranges))
        if missing or extra:
            raise GeometryError(
                f"{self.kind} parameters mismatch (missing: {missing}, unexpected: {extra})"
            )
        for name, (lo, hi) in ranges.items():
            value = float(self.params[name])
            if not (lo - 1e-12 <= value <= hi + 1e-12):
                raise GeometryError(f"{self.kind}.{name}={value} outside [{lo}, {hi}]")
            self.params[name] = value

    @property
    def p(self) -> dict[str, float]:
        return self.params

    def key(self) -> str:
        """Stable hash of kind and parameters."""
        payload = json.dumps({"kind": self.kind, "params": self.params}, sort_keys=True)
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "mesh_detail": self.mesh_detail}

    @classmethod
    def from_dict(cls, data: dict) -> "AnimationFamily":
        return cls(data["kind"], dict(data["params"]), int(data.get("mesh_detail", 2)))

    # Canonical shape

    def canonical_mesh(self) -> TriMesh:
        p, detail = self.params, self.mesh_detail
        if self.kind == "pulsing-ellipsoid":
            sphere = icosphere(detail + 1)
            radii = np.array([p["radius_x"], p["radius_y"], p["radius_z"]])
            return sphere.with_vertices(sphere.vertices * radii)
        if self.kind == "bending-bar":
            h = p["half_thickness"]
            return box_mesh((p["length"], 2 * h, 2 * h), (8 * (detail + 1), 2, 2))
        if self.kind == "two-link-arm":
            base, joint, end_1, start_2, end_2 = self._arm_layout()
            w = p["half_width"]
            link_1 = box_mesh(
                (end_1 - base, 2 * w, 2 * w), (4 * (detail + 1), 1, 1), ((base + end_1) / 2, 0, 0)
            )
            link_2 = box_mesh(
                (end_2 - start_2, 2 * w, 2 * w), (4 * (detail + 1), 1, 1), ((start_2 + end_2) / 2, 0, 0)
            )
            return merge_meshes([link_1, link_2])
        sphere_a = icosphere(detail + 1, p["radius_a"], (p["separation"], 0.0, 0.0))
        sphere_b = icosphere(detail + 1, p["radius_b"], (-p["separation"], 0.0, 0.0))
        return merge_meshes([sphere_a, sphere_b])

    def _arm_layout(self) -> tuple[float, float, float, float, float]:
        p = self.params
        total = p["length_1"] + ARM_GAP + p["length_2"]
        base = -total / 2.0
        end_1 = base + p["length_1"]
        start_2 = end_1 + ARM_GAP
        return base, end_1 + ARM_GAP / 2.0, end_1, start_2, start_2 + p["length_2"]

    # Pose

    def bend_angle(self, t: float) -> float:
        p = self.params
        return float(p["max_bend"] * _motion(t, p["frequency"], p["phase"]) / 2.0)

    def arm_angles(self, t: float) -> tuple[float, float]:
        p = self.params
        shoulder = p["shoulder_amplitude"] * _motion(t, p["frequency"], p["phase"]) / 2.0
        elbow = p["elbow_amplitude"] * _motion(t, p["frequency"], p["phase"] + math.pi / 3) / 2.0
        return float(shoulder), float(elbow)

    def ellipsoid_scales(self, t: float) -> np.ndarray:
        p = self.params
        m = float(_motion(t, p["frequency"], p["phase"]))
        return 1.0 + np.array([p["amplitude_x"], p["amplitude_y"], p["amplitude_z"]]) * m

    def orbit_pose(self, t: float) -> tuple[float, float]:
        p = self.params
        angle = TWO_PI * p["orbit_turns"] * float(t)
        lift = p["bob_amplitude"] * float(_motion(t, p["frequency"], p["phase"]))
        return angle, lift

    # Deformation

    def deform(
        self, positions: np.ndarray, normals: Optional[np.ndarray], t: float
    ) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Map canonical points (and normals) to framestep ``t``."""
        x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = None if normals is None else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if self.kind == "pulsing-ellipsoid":
            s = self.ellipsoid_scales(t)
            return x * s, None if n is None else _unit(n / s)
        if self.kind == "bending-bar":
            return self._bend(x, n, t)
        if self.kind == "two-link-arm":
            return self._arm(x, n, t)
        angle, lift = self.orbit_pose(t)
        rot = _rot_z(angle)
        moved = x @ rot.T + np.array([0.0, 0.0, lift])
        return moved, None if n is None else n @ rot.T

    def _bend(self, x, n, t):
        theta = self.bend_angle(t)
        if abs(theta) < 1e-8:
            return x.copy(), None if n is None else n.copy()
        radius = self.params["length"] / theta
        alpha = x[:, 0] / radius
        arm = radius - x[:, 1]
        moved = np.stack([arm * np.sin(alpha), radius - arm * np.cos(alpha), x[:, 2]], axis=1)
        if n is None:
            return moved, None
        stretch = arm / radius
        local = np.stack([n[:, 0] / stretch, n[:, 1], n[:, 2]], axis=1)
        c, s = np.cos(alpha), np.sin(alpha)
        rotated = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]], axis=1)
        return moved, _unit(rotated)

    def _arm(self, x, n, t):
        base, joint, *_ = self._arm_layout()
        shoulder, elbow = self.arm_angles(t)
        r1 = _rot_z(shoulder)
        r2 = r1 @ _rot_z(elbow)
        pivot = np.array([base, 0.0, 0.0])
        elbow_at = np.array([joint, 0.0, 0.0])
        second = x[:, 0] > joint
        moved = np.empty_like(x)
        moved[~second] = pivot + (x[~second] - pivot) @ r1.T
        moved[second] = pivot + (elbow_at - pivot) @ r1.T + (x[second] - elbow_at) @ r2.T
        if n is None:
            return moved, None
        out_n = np.empty_like(n)
        out_n[~second] = n[~second] @ r1.T
        out_n[second] = n[second] @ r2.T
        return moved, out_n

    def deform_cloud(self, cloud: SurfacePointCloud, t: float) -> SurfacePointCloud:
        positions, normals = self.deform(cloud.positions, cloud.normals, t)
        return SurfacePointCloud(positions, normals)

    # Occupancy

    def signed_distance(self, points: np.ndarray, t: float) -> np.ndarray:
        """Approximate signed distance (negative inside) at framestep ``t``."""
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        p = self.params
        if self.kind == "pulsing-ellipsoid":
            axes = self.ellipsoid_scales(t) * np.array([p["radius_x"], p["radius_y"], p["radius_z"]])
            u = q / axes
            r = np.linalg.norm(u, axis=1)
            grad = np.linalg.norm(u / np.maximum(r, 1e-12)[:, None] / axes, axis=1)
            d = (r - 1.0) / np.maximum(grad, 1e-12)
            return np.where(r > 1e-12, d, -float(np.min(axes)))
        if self.kind == "bending-bar":
            h = p["half_thickness"]
            half = np.array([p["length"] / 2.0, h, h])
            return _box_sdf(self._unbend(q, t), -half, half)
        if self.kind == "two-link-arm":
            base, joint, end_1, start_2, end_2 = self._arm_layout()
            w = p["half_width"]
            shoulder, elbow = self.arm_angles(t)
            pivot = np.array([base, 0.0, 0.0])
            elbow_at = np.array([joint, 0.0, 0.0])
            local_1 = pivot + (q - pivot) @ _rot_z(-shoulder).T
            local_2 = elbow_at + (local_1 - elbow_at) @ _rot_z(-elbow).T
            d1 = _box_sdf(local_1, np.array([base, -w, -w]), np.array([end_1, w, w]))
            d2 = _box_sdf(local_2, np.array([start_2, -w, -w]), np.array([end_2, w, w]))
            return np.minimum(d1, d2)
        angle, lift = self.orbit_pose(t)
        local = (q - np.array([0.0, 0.0, lift])) @ _rot_z(-angle).T
        da = np.linalg.norm(local - np.array([p["separation"], 0, 0]), axis=1) - p["radius_a"]
        db = np.linalg.norm(local + np.array([p["separation"], 0, 0]), axis=1) - p["radius_b"]
        return np.minimum(da, db)

    def _unbend(self, q: np.ndarray, t: float) -> np.ndarray:
        theta = self.bend_angle(t)
        if abs(theta) < 1e-8:
            return q
        radius = self.params["length"] / theta
        sign = math.copysign(1.0, radius)
        alpha = np.arctan2(q[:, 0] * sign, (radius - q[:, 1]) * sign)
        y = radius - sign * np.hypot(q[:, 0], radius - q[:, 1])
        return np.stack([radius * alpha, y, q[:, 2]], axis=1)

    def occupancy(self, points: np.ndarray, framestep: float, band: float = 0.0) -> np.ndarray:
        return _band(self.signed_distance(points, framestep), band)

    # Conditioning

    def pose_vector(self, t: float) -> np.ndarray:
        p = self.params
        slots = np.zeros(POSE_SLOTS)
        if self.kind == "pulsing-ellipsoid":
            values = [p["radius_x"], p["radius_y"], p["radius_z"], *self.ellipsoid_scales(t)]
        elif self.kind == "bending-bar":
            theta = self.bend_angle(t)
            values = [p["length"], p["half_thickness"], theta, math.sin(theta), math.cos(theta)]
        elif self.kind == "two-link-arm":
            a, b = self.arm_angles(t)
            values = [
                p["length_1"], p["length_2"], p["half_width"], a, b,
                math.sin(a), math.cos(a), math.sin(a + b), math.cos(a + b),
            ]
        else:
            angle, lift = self.orbit_pose(t)
            values = [p["radius_a"], p["radius_b"], p["separation"], math.cos(angle), math.sin(angle), lift]
        slots[: len(values)] = values
        return slots


def _unit(vectors: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vectors, axis=1, keepdims=True)
    return np.divide(vectors, norm, out=np.zeros_like(vectors), where=norm > 0)


def random_family(kind: str, rng: np.random.Generator, mesh_detail: int = 2) -> AnimationFamily:
    """Family of ``kind`` with parameters drawn uniformly from their ranges."""
    if kind not in PARAM_RANGES:
        raise GeometryError(f"unknown family kind: {kind}")
    params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES[kind].items()}
    return AnimationFamily(kind, params, mesh_detail)


def make_framesteps(n_frames: int, spacing: float = DEFAULT_FRAME_SPACING) -> np.ndarray:
    """``t_k = k * spacing`` for ``k < n_frames``."""
    return np.arange(n_frames, dtype=np.float64) * spacing


def cond_descriptor(family: AnimationFamily, framesteps: Sequence[float]) -> np.ndarray:
    """Per-frame conditioning vectors, shape ``(N, 24)``.

    Layout: family one-hot (4), pose slots (16), then sin/cos of ``2*pi*t`` and
    ``pi*t``.
    """
    framesteps = np.asarray(framesteps, dtype=np.float64)
    out = np.zeros((len(framesteps), COND_DIM))
    out[:, FAMILY_KINDS.index(family.kind)] = 1.0
    for k, t in enumerate(framesteps):
        out[k, 4 : 4 + POSE_SLOTS] = family.pose_vector(t)
        out[k, 20:] = [
            math.sin(TWO_PI * t), math.cos(TWO_PI * t), math.sin(math.pi * t), math.cos(math.pi * t)
        ]
    return out


@dataclass
class GeneratedAnimation:
    """One synthetic animation with material-point consistent clouds."""

    family: AnimationFamily
    framesteps: np.ndarray
    canonical: SurfacePointCloud
    frames: list[SurfacePointCloud]
    ground_truth: AnimatedMesh
    cond: np.ndarray


def make_animation(
    family: AnimationFamily,
    n_frames: int,
    seed: int,
    n_points: int = 4096,
    spacing: float = DEFAULT_FRAME_SPACING,
) -> GeneratedAnimation:
    """Sample a canonical cloud once and deform it to every framestep.

    Record ``i`` of every frame cloud is the image of canonical record ``i``.

    Raises:
        GeometryError: If fewer than two frames are requested.
    """
    if n_frames < 2:
        raise GeometryError(f"an animation needs at least 2 frames, got {n_frames}")
    framesteps = make_framesteps(n_frames, spacing)
    mesh = family.canonical_mesh()
    canonical = sample_surface(mesh, n_points, seed)
    frames = [family.deform_cloud(canonical, t) for t in framesteps]
    vertices = np.stack([family.deform(mesh.vertices, None, t)[0] for t in framesteps])
    ground_truth = AnimatedMesh(mesh.faces, framesteps, vertices)
    return GeneratedAnimation(
        family=family,
        framesteps=framesteps,
        canonical=canonical,
        frames=frames,
        ground_truth=ground_truth,
        cond=cond_descriptor(family, framesteps),
    )
