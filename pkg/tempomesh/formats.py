"""On-disk formats: binary point clouds, OBJ meshes and animation manifests."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import toml

from tempomesh.errors import GeometryError
from tempomesh.geometry import AnimatedMesh, MeshSequence, SurfacePointCloud, TriMesh

POINT_CLOUD_MAGIC = b"TMPC"
POINT_CLOUD_VERSION = 1
ANIMATION_FORMAT_VERSION = 1


def write_point_cloud(path: Path, cloud: SurfacePointCloud) -> Path:
    """Write ``cloud`` as little-endian float32 records of position and normal.

    Header: 4-byte magic, u16 version, u16 reserved, u32 count, u32 fields (6).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.ascontiguousarray(cloud.records, dtype="<f4")
    header = POINT_CLOUD_MAGIC + struct.pack("<HHII", POINT_CLOUD_VERSION, 0, len(records), 6)
    path.write_bytes(header + records.tobytes())
    return path


def read_point_cloud(path: Path) -> SurfacePointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != POINT_CLOUD_MAGIC:
        raise GeometryError(f"{path} is not a tempomesh point cloud")
    version, _, count, fields = struct.unpack("<HHII", raw[4:16])
    if version != POINT_CLOUD_VERSION or fields != 6:
        raise GeometryError(f"unsupported point cloud layout in {path}: v{version}, {fields} fields")
    body = raw[16:]
    if len(body) != count * fields * 4:
        raise GeometryError(f"point cloud {path} is truncated")
    records = np.frombuffer(body, dtype="<f4").reshape(count, fields)
    return SurfacePointCloud.from_records(records.astype(np.float64))


def _obj_text(mesh: TriMesh, normals: Optional[np.ndarray] = None) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def write_obj(path: Path, mesh: TriMesh, normals: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_obj_text(mesh, normals), encoding="utf-8")
    return path


def read_obj(path: Path) -> TriMesh:
    """Read vertices and triangular faces; polygons are fanned into triangles."""
    vertices, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(token.split("/")[0]) for token in parts[1:]]
            idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.asarray(vertices).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_animation(
    directory: Path,
    anim: Union[AnimatedMesh, MeshSequence],
    fixed_topology: bool = False,
    manifest_name: str = "animation.manifest",
    prefix: str = "frame_",
) -> Path:
    """Write one OBJ per frame plus a TOML manifest.

    Args:
        directory: Target directory.
        anim: Animation to export.
        fixed_topology: Require identical faces on every frame.
        manifest_name: File name of the manifest.
        prefix: Frame file name prefix.

    Returns:
        Path: The manifest path.

    Raises:
        GeometryError: If ``fixed_topology`` is set and frames disagree on faces.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shared = isinstance(anim, AnimatedMesh)
    if fixed_topology and not shared:
        first = anim.meshes[0].faces
        if any(m.faces.shape != first.shape or not np.array_equal(m.faces, first) for m in anim.meshes):
            raise GeometryError("frames do not share one topology")
        shared = True
    files = []
    for k, mesh in enumerate(anim.frames()):
        name = f"{prefix}{k:04d}.obj"
        write_obj(directory / name, mesh)
        files.append(name)
    manifest = {
        "format_version": ANIMATION_FORMAT_VERSION,
        "n_frames": len(anim),
        "framesteps": [float(t) for t in anim.framesteps],
        "shared_topology": shared,
        "flags": [list(m.flags) for m in anim.frames()],
        "files": files,
    }
    path = directory / manifest_name
    path.write_text(toml.dumps(manifest), encoding="utf-8")
    return path


def read_animation(manifest_path: Path) -> Union[AnimatedMesh, MeshSequence]:
    manifest_path = Path(manifest_path)
    try:
        manifest = toml.loads(manifest_path.read_text(encoding="utf-8"))
    except toml.TomlDecodeError as e:
        raise GeometryError(f"invalid animation manifest {manifest_path}: {e}") from e
    meshes = [read_obj(manifest_path.parent / name) for name in manifest["files"]]
    flags = manifest.get("flags", [[] for _ in meshes])
    meshes = [TriMesh(m.vertices, m.faces, tuple(f)) for m, f in zip(meshes, flags)]
    framesteps = np.asarray(manifest["framesteps"], dtype=np.float64)
    if manifest.get("shared_topology") and meshes:
        return AnimatedMesh(meshes[0].faces, framesteps, np.stack([m.vertices for m in meshes]))
    return MeshSequence(framesteps, meshes)


def write_descriptor(path: Path, payload: dict) -> Path:
    """Write a JSON conditioning descriptor with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_descriptor(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
