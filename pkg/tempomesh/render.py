"""Flat turntable renders of animations for visual inspection."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from loguru import logger  # noqa: E402

from tempomesh.geometry import AnimatedMesh, MeshSequence, TriMesh  # noqa: E402

plt.rcParams["font.size"] = 8
plt.rcParams["figure.dpi"] = 100


def _draw(ax, mesh: TriMesh, azimuth: float, title: str) -> None:
    ax.set_title(title)
    ax.set_xlim(-1, 1)
    ax.set_ylim(-1, 1)
    ax.set_zlim(-1, 1)
    ax.set_box_aspect((1, 1, 1))
    ax.view_init(elev=20.0, azim=azimuth)
    ax.set_axis_off()
    if mesh.is_empty:
        ax.text(0, 0, 0, "empty", ha="center")
        return
    v = mesh.vertices
    ax.plot_trisurf(v[:, 0], v[:, 1], v[:, 2], triangles=mesh.faces, color="#8fa8c8", linewidth=0.0)


def render_animation(
    anim: Union[AnimatedMesh, MeshSequence],
    path: Path,
    max_frames: int = 8,
    columns: int = 4,
    turntable: bool = True,
    title: Optional[str] = None,
) -> Path:
    """Draw up to ``max_frames`` evenly spaced frames into one PNG grid.

    With ``turntable`` the camera azimuth advances a full turn across the panels.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    picks = np.unique(np.linspace(0, len(anim) - 1, min(max_frames, len(anim))).round().astype(int))
    rows = math.ceil(len(picks) / columns)
    fig = plt.figure(figsize=(2.5 * min(columns, len(picks)), 2.5 * rows))
    for panel, k in enumerate(picks):
        ax = fig.add_subplot(rows, columns, panel + 1, projection="3d")
        azimuth = -60.0 + (360.0 * panel / len(picks) if turntable else 0.0)
        _draw(ax, anim.frame(int(k)), azimuth, f"t={anim.framesteps[k]:.3f}")
    if title:
        fig.suptitle(title)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    logger.debug(f"RENDER [DONE] | frames: {len(picks)} | path: {path}")
    return path
