"""Synthetic scene corpus: generation, loading and the train/eval split."""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import toml
from loguru import logger

from tempomesh.config import DatasetConfig
from tempomesh.errors import GeometryError
from tempomesh.families import AnimationFamily, make_animation, random_family
from tempomesh.formats import (
    read_animation,
    read_descriptor,
    read_point_cloud,
    write_animation,
    write_descriptor,
    write_point_cloud,
)
from tempomesh.geometry import AnimatedMesh, SurfacePointCloud
from tempomesh.numerics import make_rng
from tempomesh.security import OutputGuard
from tempomesh.training import ProgressBarProtocol

DATASET_MANIFEST = "dataset.toml"
DATASET_FORMAT_VERSION = 1
EVAL_SEED_OFFSET = 1_000_000
SPLITS = ("train", "eval")

CANONICAL_FILE = "canonical.pc"
COND_FILE = "cond.json"
GT_MANIFEST = "gt_anim.manifest"


def scene_seed(base_seed: int, index: int, split: str) -> int:
    """Seed of scene ``index``; eval scenes live in their own seed range."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    return base_seed + index + (EVAL_SEED_OFFSET if split == "eval" else 0)


def scene_id(seed: int, family: AnimationFamily) -> str:
    """Content id of a scene: the same seed and family give the same id in either split."""
    return hashlib.sha1(f"{seed}:{family.key()}".encode("utf-8")).hexdigest()[:12]


def _write_scene(job: tuple[DatasetConfig, str, int, str]) -> str:
    config, split, index, root = job
    seed = scene_seed(config.seed, index, split)
    kind = config.families[index % len(config.families)]
    family = random_family(kind, make_rng(seed), config.mesh_detail)
    anim = make_animation(family, config.n_frames, seed, config.n_points, config.frame_spacing)
    sid = scene_id(seed, family)
    directory = Path(root) / "scenes" / sid
    write_point_cloud(directory / CANONICAL_FILE, anim.canonical)
    for k, cloud in enumerate(anim.frames):
        write_point_cloud(directory / f"frame_{k:04d}.pc", cloud)
    write_animation(directory, anim.ground_truth, fixed_topology=True, manifest_name=GT_MANIFEST, prefix="gt_")
    write_descriptor(
        directory / COND_FILE,
        {
            "scene_id": sid,
            "split": split,
            "index": index,
            "seed": seed,
            "family": family.to_dict(),
            "framesteps": [float(t) for t in anim.framesteps],
            "cond": anim.cond.tolist(),
        },
    )
    return sid


def generate_dataset(
    config: DatasetConfig,
    out_dir: Path,
    split: str = "train",
    force: bool = False,
    progress: Optional[ProgressBarProtocol] = None,
    task_id: Optional[int] = None,
) -> Path:
    """Write ``config.count`` (train) or ``config.eval_count`` (eval) scenes under ``out_dir``.

    Scene ``i`` uses family ``config.families[i % len]`` and seed ``seed + i``
    (eval scenes are offset by ``EVAL_SEED_OFFSET``), so the output does not
    depend on the number of workers.

    Raises:
        OutputPathError: If ``out_dir`` is unsafe or not empty without ``force``.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    root = OutputGuard.prepare(Path(out_dir), force)
    count = config.count if split == "train" else config.eval_count
    logger.info(f"DATASET [START] | split: {split} | scenes: {count} | frames: {config.n_frames} | out: {root}")
    jobs = [(config, split, i, str(root)) for i in range(count)]

    ids: list[str] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for sid in pool.map(_write_scene, jobs):
                ids.append(sid)
                if progress is not None and task_id is not None:
                    progress.update(task_id, advance=1)
    else:
        for job in jobs:
            ids.append(_write_scene(job))
            if progress is not None and task_id is not None:
                progress.update(task_id, advance=1)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "split": split,
        "count": count,
        "seed": config.seed,
        "n_frames": config.n_frames,
        "n_points": config.n_points,
        "frame_spacing": config.frame_spacing,
        "families": list(config.families),
        "scenes": ids,
    }
    (root / DATASET_MANIFEST).write_text(toml.dumps(manifest), encoding="utf-8")
    logger.info(f"DATASET [DONE] | split: {split} | scenes: {len(ids)}")
    return root


@dataclass
class Scene:
    """One scene directory; clouds and meshes are read on first access."""

    scene_id: str
    root: Path
    split: str
    seed: int
    family: AnimationFamily
    framesteps: np.ndarray
    cond: np.ndarray

    @classmethod
    def load(cls, directory: Path) -> "Scene":
        directory = Path(directory)
        descriptor = read_descriptor(directory / COND_FILE)
        return cls(
            scene_id=descriptor["scene_id"],
            root=directory,
            split=descriptor["split"],
            seed=int(descriptor["seed"]),
            family=AnimationFamily.from_dict(descriptor["family"]),
            framesteps=np.asarray(descriptor["framesteps"], dtype=np.float64),
            cond=np.asarray(descriptor["cond"], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.framesteps)

    @cached_property
    def canonical(self) -> SurfacePointCloud:
        return read_point_cloud(self.root / CANONICAL_FILE)

    @cached_property
    def frames(self) -> list[SurfacePointCloud]:
        return [read_point_cloud(self.root / f"frame_{k:04d}.pc") for k in range(len(self))]

    @cached_property
    def ground_truth(self) -> AnimatedMesh:
        anim = read_animation(self.root / GT_MANIFEST)
        if not isinstance(anim, AnimatedMesh):
            raise GeometryError(f"ground truth of scene {self.scene_id} has no shared topology")
        return anim


@dataclass
class Dataset:
    root: Path
    split: str
    seed: int
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def scene_ids(self) -> set[str]:
        return {s.scene_id for s in self.scenes}


def load_dataset(root: Path, limit: Optional[int] = None) -> Dataset:
    """Read a generated split.

    Raises:
        FileNotFoundError: If ``root`` holds no dataset manifest.
    """
    root = Path(root)
    manifest_path = root / DATASET_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {DATASET_MANIFEST} in {root}")
    manifest = toml.loads(manifest_path.read_text(encoding="utf-8"))
    ids = manifest["scenes"][:limit] if limit else manifest["scenes"]
    scenes = [Scene.load(root / "scenes" / sid) for sid in ids]
    logger.debug(f"DATASET [LOADED] | split: {manifest['split']} | scenes: {len(scenes)} | root: {root}")
    return Dataset(root, manifest["split"], int(manifest["seed"]), scenes)


def assert_disjoint(train: Dataset, held_out: Dataset) -> None:
    """Raise ValueError if the two splits share a scene id."""
    shared = train.scene_ids & held_out.scene_ids
    if shared:
        raise ValueError(f"train and eval splits share {len(shared)} scenes, e.g. {sorted(shared)[0]}")


def dataset_hash(root: Path) -> str:
    """SHA-256 over the relative path and bytes of every file under ``root``."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
