"""Meshes, point clouds and the geometric operations used by every stage."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Protocol, Sequence, Union

import numpy as np
from loguru import logger
from skimage import measure

from tempomesh.errors import GeometryError
from tempomesh.numerics import make_rng

UNIT_TOLERANCE = 1e-4
CUBE_FILL = 0.9


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    Attributes:
        vertices: ``(V, 3)`` float64 positions.
        faces: ``(F, 3)`` int64 vertex indices.
        flags: Markers such as ``"empty"`` set by the producing operation.
    """

    vertices: np.ndarray
    faces: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise GeometryError(
                    f"face index out of range for {len(self.vertices)} vertices"
                )
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise GeometryError("mesh has faces with repeated vertex indices")

    @classmethod
    def empty(cls, reason: str = "empty") -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), flags=(reason,))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def signed_volume(self) -> float:
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.flags)


@dataclass
class AnimatedMesh:
    """One face array shared by every frame.

    Attributes:
        faces: ``(F, 3)`` indices shared by all frames.
        framesteps: ``(N,)`` strictly increasing times.
        vertices: ``(N, V, 3)`` per-frame positions.
    """

    faces: np.ndarray
    framesteps: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.framesteps = np.asarray(self.framesteps, dtype=np.float64).reshape(-1)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        n = len(self.framesteps)
        if self.vertices.ndim != 3 or self.vertices.shape[0] != n or self.vertices.shape[2] != 3:
            raise GeometryError(
                f"vertices must be ({n}, V, 3), got {self.vertices.shape}"
            )
        if n > 1 and np.any(np.diff(self.framesteps) <= 0):
            raise GeometryError("framesteps must be strictly increasing")
        if len(self.faces) and self.faces.max() >= self.vertices.shape[1]:
            raise GeometryError("face index out of range")

    def __len__(self) -> int:
        return len(self.framesteps)

    def frame(self, k: int) -> TriMesh:
        return TriMesh(self.vertices[k], self.faces)

    def frames(self) -> Iterator[TriMesh]:
        for k in range(len(self)):
            yield self.frame(k)


@dataclass
class MeshSequence:
    """Independent meshes per frame; topology may differ between frames."""

    framesteps: np.ndarray
    meshes: list[TriMesh]

    def __post_init__(self):
        self.framesteps = np.asarray(self.framesteps, dtype=np.float64).reshape(-1)
        if len(self.meshes) != len(self.framesteps):
            raise GeometryError(
                f"{len(self.meshes)} meshes for {len(self.framesteps)} framesteps"
            )
        if len(self.framesteps) > 1 and np.any(np.diff(self.framesteps) <= 0):
            raise GeometryError("framesteps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.framesteps)

    def frame(self, k: int) -> TriMesh:
        return self.meshes[k]

    def frames(self) -> Iterator[TriMesh]:
        return iter(self.meshes)


Animation = Union[AnimatedMesh, MeshSequence]


@dataclass
class SurfacePointCloud:
    """Oriented surface samples.

    Attributes:
        positions: ``(P, 3)`` points.
        normals: ``(P, 3)`` unit normals.
    """

    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.normals.shape:
            raise GeometryError(
                f"positions {self.positions.shape} and normals {self.normals.shape} disagree"
            )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def records(self) -> np.ndarray:
        """``(P, 6)`` array of position and normal per point."""
        return np.concatenate([self.positions, self.normals], axis=1)

    @classmethod
    def from_records(cls, records: np.ndarray) -> "SurfacePointCloud":
        records = np.asarray(records).reshape(-1, 6)
        return cls(records[:, :3], records[:, 3:])

    def validate(self) -> None:
        lengths = np.linalg.norm(self.normals, axis=1)
        if len(lengths) and np.max(np.abs(lengths - 1.0)) > UNIT_TOLERANCE:
            raise GeometryError("point cloud normals are not unit length")


class OccupancyField(Protocol):
    def occupancy(self, points: np.ndarray, framestep: float, band: float = 0.0) -> np.ndarray:
        ...


# Primitive meshes


def icosphere(subdivisions: int = 2, radius: float = 1.0, center: Sequence[float] = (0, 0, 0)) -> TriMesh:
    """Subdivided icosahedron with outward-facing triangles."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vertices = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoint[key] = len(vertices) - 1
            return midpoint[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    points = np.asarray(vertices) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(points, np.asarray(faces))


def box_mesh(
    extents: Sequence[float] = (1.0, 1.0, 1.0),
    divisions: Sequence[int] = (1, 1, 1),
    center: Sequence[float] = (0, 0, 0),
) -> TriMesh:
    """Closed axis-aligned box whose faces are split into a lattice of quads.

    Each quad is split along the diagonal from its lowest to its highest lattice
    corner, so the box corner with all coordinates maximal touches both
    triangles of its quad on every adjacent face.
    """
    div = [int(d) for d in divisions]
    if min(div) < 1:
        raise GeometryError(f"box divisions must be positive, got {divisions}")
    ext = np.asarray(extents, dtype=np.float64)
    index: dict[tuple[int, int, int], int] = {}
    lattice: list[tuple[int, int, int]] = []

    def vid(p: tuple[int, int, int]) -> int:
        if p not in index:
            index[p] = len(lattice)
            lattice.append(p)
        return index[p]

    faces: list[tuple[int, int, int]] = []
    for axis, (u, v) in ((0, (1, 2)), (1, (2, 0)), (2, (0, 1))):
        for side in (0, div[axis]):
            outward = side == div[axis]
            for i in range(div[u]):
                for j in range(div[v]):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis], p[u], p[v] = side, i + du, j + dv
                        corners.append(vid(tuple(p)))
                    a, b, c, d = corners
                    if outward:
                        faces += [(a, b, c), (a, c, d)]
                    else:
                        faces += [(a, c, b), (a, d, c)]
    grid = np.asarray(lattice, dtype=np.float64) / np.asarray(div, dtype=np.float64)
    vertices = (grid - 0.5) * ext + np.asarray(center, dtype=np.float64)
    return TriMesh(vertices, np.asarray(faces))


def merge_meshes(meshes: Sequence[TriMesh]) -> TriMesh:
    offset = 0
    vertices, faces = [], []
    for mesh in meshes:
        vertices.append(mesh.vertices)
        faces.append(mesh.faces + offset)
        offset += len(mesh.vertices)
    return TriMesh(np.concatenate(vertices), np.concatenate(faces))


# Topology


def is_watertight(mesh: TriMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    if mesh.is_empty:
        return False
    f = mesh.faces
    pairs = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriMesh) -> int:
    used = np.unique(mesh.faces)
    return int(len(used) - len(mesh.edges()) + len(mesh.faces))


# Sampling


def _draw_surface_samples(
    areas: np.ndarray, n_points: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    total = float(areas.sum())
    if not total > 0:
        raise GeometryError("cannot sample a surface with zero total area")
    cumulative = np.cumsum(areas)
    picks = rng.random(n_points) * cumulative[-1]
    face_idx = np.minimum(np.searchsorted(cumulative, picks, side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_idx, bary


def _evaluate_samples(
    vertices: np.ndarray, faces: np.ndarray, face_idx: np.ndarray, bary: np.ndarray
) -> SurfacePointCloud:
    tri = vertices[faces[face_idx]]
    positions = np.einsum("pk,pkd->pd", bary, tri)
    mesh = TriMesh(vertices, faces)
    normals = mesh.face_normals()[face_idx]
    return SurfacePointCloud(positions, normals)


def sample_surface(mesh: TriMesh, n_points: int, seed: int) -> SurfacePointCloud:
    """Area-weighted surface samples with face normals.

    Raises:
        GeometryError: If the mesh has no faces or zero total area.
    """
    if mesh.is_empty:
        raise GeometryError("cannot sample an empty mesh")
    rng = make_rng(seed)
    face_idx, bary = _draw_surface_samples(mesh.face_areas(), n_points, rng)
    return _evaluate_samples(mesh.vertices, mesh.faces, face_idx, bary)


def sample_surface_tracked(anim: AnimatedMesh, n_points: int, seed: int) -> list[SurfacePointCloud]:
    """Draw faces and barycentric weights once on the first frame and evaluate them on every frame.

    Sample ``i`` of every returned cloud is the same material point.
    """
    rng = make_rng(seed)
    face_idx, bary = _draw_surface_samples(anim.frame(0).face_areas(), n_points, rng)
    return [_evaluate_samples(anim.vertices[k], anim.faces, face_idx, bary) for k in range(len(anim))]


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals; vertices without faces get a zero normal."""
    cross = mesh.face_cross()
    accum = np.zeros_like(mesh.vertices)
    for corner in range(3):
        np.add.at(accum, mesh.faces[:, corner], cross)
    norm = np.linalg.norm(accum, axis=1, keepdims=True)
    isolated = norm[:, 0] == 0
    if isolated.any():
        logger.warning(f"GEOMETRY [ISOLATED] | vertices without normal: {int(isolated.sum())}")
    return np.divide(accum, norm, out=np.zeros_like(accum), where=norm > 0)


# Inside tests


_RAY = np.array([1.0, 0.0012345, 0.0023456])
_RAY /= np.linalg.norm(_RAY)


def _ray_parity(mesh: TriMesh, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    tri = mesh.triangles()
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(_RAY, e2)
    det = np.einsum("fd,fd->f", e1, pvec)
    valid = np.abs(det) > 1e-14
    inv_det = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    inside = np.zeros(len(points), dtype=bool)
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        tvec = p[:, None, :] - v0[None]
        u = np.einsum("pfd,fd->pf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("d,pfd->pf", _RAY, qvec) * inv_det
        t = np.einsum("pfd,fd->pf", qvec, e2) * inv_det
        hit = valid & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[start : start + chunk] = (hit.sum(axis=1) % 2) == 1
    return inside


def winding_number(mesh: TriMesh, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Generalised winding number from summed signed solid angles."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    out = np.zeros(len(points))
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        a = tri[None, :, 0] - p[:, None]
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
        numerator = np.einsum("pfd,pfd->pf", a, np.cross(b, c))
        denominator = (
            la * lb * lc
            + np.einsum("pfd,pfd->pf", a, b) * lc
            + np.einsum("pfd,pfd->pf", b, c) * la
            + np.einsum("pfd,pfd->pf", c, a) * lb
        )
        out[start : start + chunk] = np.arctan2(numerator, denominator).sum(axis=1) / (2 * np.pi)
    return out


def occupancy(
    field: Union[TriMesh, OccupancyField],
    points: np.ndarray,
    framestep: float = 0.0,
    band: float = 0.0,
) -> np.ndarray:
    """Inside indicator in ``[0, 1]`` for each point.

    For a :class:`TriMesh` this is ray parity and the mesh must be watertight;
    any other field is asked for its own (optionally band-smoothed) occupancy at
    ``framestep``.

    Raises:
        GeometryError: If a mesh field is not watertight.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(field, TriMesh):
        if not is_watertight(field):
            raise GeometryError("ray-parity occupancy needs a watertight mesh")
        return _ray_parity(field, points).astype(np.float64)
    return np.asarray(field.occupancy(points, framestep, band), dtype=np.float64)


# Extraction and normalisation


def grid_points(resolution: int, bounds: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """``resolution**3`` lattice points in C order matching :func:`marching_cubes`."""
    axis = np.linspace(bounds[0], bounds[1], resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def marching_cubes(
    grid: np.ndarray, iso: float = 0.5, bounds: tuple[float, float] = (-1.0, 1.0)
) -> TriMesh:
    """Iso-surface of a cubic scalar grid sampled on :func:`grid_points`.

    Faces are oriented outwards with respect to the high-valued region. When
    ``iso`` lies outside the value range the result is an empty mesh flagged
    ``"empty"``.

    Raises:
        GeometryError: If the grid is not cubic or has fewer than 8 cells per axis.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise GeometryError(f"marching cubes needs a cubic grid, got {grid.shape}")
    if grid.shape[0] < 8:
        raise GeometryError(f"grid resolution {grid.shape[0]} is below the minimum of 8")
    if not (grid.min() < iso < grid.max()):
        logger.warning(f"EXTRACT [EMPTY] | iso: {iso} | range: [{grid.min():.3g}, {grid.max():.3g}]")
        return TriMesh.empty()
    spacing = (bounds[1] - bounds[0]) / (grid.shape[0] - 1)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            grid, level=iso, spacing=(spacing,) * 3, allow_degenerate=False
        )
    except (ValueError, RuntimeError) as e:
        logger.warning(f"EXTRACT [EMPTY] | {e}")
        return TriMesh.empty()
    mesh = TriMesh(verts + bounds[0], faces)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def cube_normalization(anim: Animation) -> tuple[np.ndarray, float]:
    """Center and scale mapping the union bounding box into 90% of ``[-1, 1]^3``.

    Raises:
        GeometryError: If every frame is empty or the union bounding box has zero extent.
    """
    if not any(len(m.vertices) for m in anim.frames()):
        raise GeometryError("cannot normalise a sequence whose frames are all empty")
    points = np.concatenate([m.vertices for m in anim.frames() if len(m.vertices)])
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise GeometryError("cannot normalise a sequence with zero extent")
    return (lo + hi) / 2.0, 2.0 * CUBE_FILL / extent


def normalize_to_cube(anim: Animation) -> Animation:
    """Apply one translation and uniform scale to every frame.

    Generated families are built inside the cube already. Meshes read from disk
    for motion transfer get the same transform from ``cube_normalization``, which
    is undone on the animated result.
    """
    center, scale = cube_normalization(anim)
    if isinstance(anim, AnimatedMesh):
        return AnimatedMesh(anim.faces, anim.framesteps, (anim.vertices - center) * scale)
    meshes = [replace(m, vertices=(m.vertices - center) * scale) for m in anim.meshes]
    return MeshSequence(anim.framesteps, meshes)


def make_watertight(mesh: TriMesh, resolution: int = 128, chunk: int = 4096) -> TriMesh:
    """Re-mesh through the winding-number field on a grid over the padded bounding box."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) / 2.0 * 1.1 + 1e-6
    unit = grid_points(resolution)
    values = np.empty(len(unit))
    for start in range(0, len(unit), chunk):
        pts = center + unit[start : start + chunk] * half
        values[start : start + chunk] = winding_number(mesh, pts)
    field_grid = (values > 0.5).astype(np.float64).reshape((resolution,) * 3)
    remeshed = marching_cubes(field_grid, 0.5)
    if remeshed.is_empty:
        return remeshed
    return TriMesh(center + remeshed.vertices * half, remeshed.faces)
