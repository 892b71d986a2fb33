"""Pose types shared by both grasp-selection methods, plus CSV export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

WORLD_UP = np.array([0.0, 0.0, 1.0])
WORLD_X = np.array([1.0, 0.0, 0.0])
# unit vector from the robot into the crop row
ROW_NORMAL = np.array([0.0, 1.0, 0.0])


def upright_orientation(approach, up_hint=WORLD_UP) -> np.ndarray:
    """Tool rotation with x = approach and z as close to ``up_hint`` as possible.

    Columns are the tool axes in world coordinates: (approach, lateral, up).
    When the approach is parallel to the hint the tool up-axis falls back to
    world x.
    """
    a = np.asarray(approach, dtype=float)
    a = a / np.linalg.norm(a)
    up = np.asarray(up_hint, dtype=float) - np.dot(up_hint, a) * a
    if np.linalg.norm(up) < 1e-9:
        up = WORLD_X - np.dot(WORLD_X, a) * a
    up /= np.linalg.norm(up)
    lateral = np.cross(up, a)
    R = np.column_stack([a, lateral, up])
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def upright_orientations(approaches: np.ndarray) -> np.ndarray:
    """Vectorised :func:`upright_orientation` for an (N, 3) array."""
    a = np.asarray(approaches, dtype=float)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    up = WORLD_UP - a[:, 2:3] * a
    norm = np.linalg.norm(up, axis=1)
    degenerate = norm < 1e-9
    if degenerate.any():
        up[degenerate] = WORLD_X - a[degenerate, 0:1] * a[degenerate]
        norm[degenerate] = np.linalg.norm(up[degenerate], axis=1)
    up /= norm[:, None]
    lateral = np.cross(up, a)
    return np.stack([a, lateral, up], axis=2)


@dataclass(frozen=True)
class ScoredPose:
    position: np.ndarray
    orientation: np.ndarray
    s1: float = 1.0
    s2: float = 1.0
    s3: float = 1.0
    utility: float = 1.0
    point_id: int = -1

    @property
    def approach(self) -> np.ndarray:
        return self.orientation[:, 0]

    @property
    def up(self) -> np.ndarray:
        return self.orientation[:, 2]

    @property
    def scores(self) -> tuple:
        return (self.s1, self.s2, self.s3)


@dataclass(frozen=True)
class CutPose:
    position: np.ndarray
    orientation: np.ndarray

    @property
    def approach(self) -> np.ndarray:
        return self.orientation[:, 0]

    @property
    def up(self) -> np.ndarray:
        return self.orientation[:, 2]


def level_orientation(row_normal=ROW_NORMAL) -> np.ndarray:
    """Level tool frame whose approach is the horizontal part of ``row_normal``."""
    n = np.asarray(row_normal, dtype=float).copy()
    n[2] = 0.0
    return upright_orientation(n / np.linalg.norm(n))


def _quat_wxyz(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


POSE_COLUMNS = ["x", "y", "z", "qw", "qx", "qy", "qz", "s1", "s2", "s3", "U"]


def write_poses_csv(poses: Iterable[ScoredPose], path=None) -> str:
    """CSV text of the poses (quaternion w-first); also written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_COLUMNS)
    for p in poses:
        q = _quat_wxyz(p.orientation)
        row = list(p.position) + list(q) + [p.s1, p.s2, p.s3, p.utility]
        w.writerow([f"{v:.9f}" for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_poses_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pos = np.array([float(row[k]) for k in ("x", "y", "z")])
            w, x, y, z = (float(row[k]) for k in ("qw", "qx", "qy", "qz"))
            R = Rotation.from_quat([x, y, z, w]).as_matrix()
            out.append(ScoredPose(pos, R, float(row["s1"]), float(row["s2"]), float(row["s3"]),
                                  float(row["U"])))
    return out
