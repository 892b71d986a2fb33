"""Cartesian waypoint trajectories: scanning, attach, separate, cut."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..cloud import RigidTransform
from ..errors import InvalidPattern
from ..pose_estimation.poses import CutPose, ScoredPose

MAX_SPACING = 0.005  # m between consecutive waypoints
DEFAULT_SPEED = 0.1  # m/s
DEFAULT_STANDOFF = 0.1
DEFAULT_RISE = 0.05
DEFAULT_SWEEP = 0.08
DEFAULT_FOLLOW_THROUGH = 0.02  # m travelled past the cut pose


class Stage(enum.Enum):
    SCAN = "SCAN"
    ATTACH = "ATTACH"
    SEPARATE = "SEPARATE"
    DETACH = "DETACH"


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # (N, 3)
    orientations: np.ndarray  # (N, 3, 3)
    timestamps: np.ndarray  # (N,)
    stage: Stage
    key_indices: tuple = ()  # indices of the un-densified vertices

    def __post_init__(self):
        if len(self.positions) != len(self.timestamps) or len(self.positions) != len(self.orientations):
            raise ValueError("trajectory arrays differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0

    @property
    def start(self) -> np.ndarray:
        return self.positions[0]

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]

    def poses(self, max_count: Optional[int] = None) -> list:
        """World-from-tool transforms, optionally thinned to ``max_count`` evenly spaced ones."""
        idx = np.arange(len(self))
        if max_count is not None and len(idx) > max_count:
            idx = np.unique(np.round(np.linspace(0, len(self) - 1, max_count)).astype(int))
        return [RigidTransform(self.orientations[i], self.positions[i]) for i in idx]

    def to_json(self) -> dict:
        return {
            "stage": self.stage.value,
            "positions": np.round(self.positions, 9).tolist(),
            "orientations": np.round(self.orientations, 12).tolist(),
            "timestamps": np.round(self.timestamps, 9).tolist(),
            "key_indices": list(self.key_indices),
        }


def densify(vertices: np.ndarray, orientations, speed: float, stage: Stage,
            max_spacing: float = MAX_SPACING, t0: float = 0.0) -> Trajectory:
    """Subdivide a polyline so no step exceeds ``max_spacing``; time = arc length / speed."""
    V = np.asarray(vertices, dtype=float)
    Rs = np.asarray(orientations, dtype=float)
    if Rs.ndim == 2:
        Rs = np.repeat(Rs[None], len(V), axis=0)
    pts = [V[0]]
    rots = [Rs[0]]
    keys = [0]
    for i in range(1, len(V)):
        seg = V[i] - V[i - 1]
        L = float(np.linalg.norm(seg))
        if L == 0.0:
            keys.append(len(pts) - 1)
            continue
        n = max(1, math.ceil(L / max_spacing - 1e-9))
        for k in range(1, n + 1):
            pts.append(V[i - 1] + seg * (k / n))
            rots.append(Rs[i])
        keys.append(len(pts) - 1)
    P = np.asarray(pts)
    step = np.linalg.norm(np.diff(P, axis=0), axis=1)
    t = t0 + np.concatenate([[0.0], np.cumsum(step)]) / speed
    return Trajectory(P, np.asarray(rots), t, stage, tuple(keys))


@dataclass(frozen=True)
class ScanPattern:
    """``kind`` is ``"boustrophedon"`` (width, height, segments) or ``"diamond"`` (radius)."""

    kind: str = "boustrophedon"
    width: float = 0.35
    height: float = 0.4
    segments: int = 3
    radius: float = 0.4
    row_offset: float = 0.25
    speed: float = DEFAULT_SPEED

    def validate(self) -> None:
        if self.kind not in ("boustrophedon", "diamond"):
            raise InvalidPattern(f"unknown scan pattern {self.kind!r}")
        if self.speed <= 0 or self.row_offset < 0:
            raise InvalidPattern("speed must be positive and row offset non-negative")
        if self.kind == "boustrophedon" and (self.width <= 0 or self.height <= 0 or self.segments < 1):
            raise InvalidPattern("boustrophedon needs positive width/height and >= 1 segment")
        if self.kind == "diamond" and self.radius <= 0:
            raise InvalidPattern("diamond radius must be positive")


TRIAL1_SCAN = ScanPattern("boustrophedon", 0.35, 0.4, 3, row_offset=0.25, speed=0.1)
TRIAL2_SCAN = ScanPattern("diamond", radius=0.4, row_offset=0.3, speed=0.1)


def camera_orientation() -> np.ndarray:
    """Row-frame camera rotation: optical axis (camera z) along +y, image up = +z."""
    # columns: camera x (right), camera y (down), camera z (forward)
    return np.column_stack([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def scan_waypoints(pattern: ScanPattern, row_frame: RigidTransform = RigidTransform.identity()) -> Trajectory:
    """Scan trajectory in the world frame.

    The row frame has its origin on the row plane at the scan centre, x along
    the row and y into the row; waypoints sit ``row_offset`` in front of the
    row plane (at negative row-frame y).
    """
    pattern.validate()
    if pattern.kind == "boustrophedon":
        w, h, n = pattern.width, pattern.height, pattern.segments
        zs = [0.0] if n == 1 else list(np.linspace(h / 2, -h / 2, n))
        verts = []
        for k, z in enumerate(zs):
            xs = (-w / 2, w / 2) if k % 2 == 0 else (w / 2, -w / 2)
            verts += [(xs[0], z), (xs[1], z)]
    else:
        r = pattern.radius
        verts = [(r, 0.0), (0.0, r), (-r, 0.0), (0.0, -r), (r, 0.0)]
    local = np.array([[x, -pattern.row_offset, z] for x, z in verts])
    world = row_frame.apply(local)
    R = row_frame.rotation @ camera_orientation()
    return densify(world, R, pattern.speed, Stage.SCAN)


def attach_trajectory(grasp: ScoredPose, standoff: float = DEFAULT_STANDOFF,
                      speed: float = DEFAULT_SPEED) -> Trajectory:
    """Straight approach along the grasp approach axis, ending on the grasp point."""
    if standoff <= 0:
        raise ValueError("standoff must be positive")
    start = grasp.position - standoff * grasp.approach
    return densify(np.array([start, grasp.position]), grasp.orientation, speed, Stage.ATTACH)


def separation_move(position, orientation, rise: float = DEFAULT_RISE,
                    speed: float = DEFAULT_SPEED) -> Trajectory:
    """Vertical lift from the attach pose, orientation held."""
    if rise <= 0:
        raise ValueError("rise must be positive")
    p = np.asarray(position, dtype=float)
    return densify(np.array([p, p + [0.0, 0.0, rise]]), orientation, speed, Stage.SEPARATE)


def cut_trajectory(cut: CutPose, sweep: float = DEFAULT_SWEEP, speed: float = DEFAULT_SPEED,
                   follow_through: float = DEFAULT_FOLLOW_THROUGH) -> Trajectory:
    """Level horizontal sweep through the cut pose.

    Starts ``sweep`` before the pose and carries on ``follow_through`` past
    it, so a peduncle slightly behind the estimate is still severed.
    """
    if sweep <= 0 or follow_through < 0:
        raise ValueError("sweep must be positive and follow_through non-negative")
    a = cut.approach.copy()
    a[2] = 0.0
    a /= np.linalg.norm(a)
    verts = [cut.position - sweep * a, cut.position]
    if follow_through > 0:
        verts.append(cut.position + follow_through * a)
    return densify(np.array(verts), cut.orientation, speed, Stage.DETACH)


@dataclass(frozen=True)
class PlanarObstacle:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("obstacle normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    @classmethod
    def behind_row(cls, row_y: float = 0.0, clearance: float = 0.1) -> "PlanarObstacle":
        """Plane ``clearance`` behind the row at ``y = row_y``, free side toward the robot."""
        return cls(np.array([0.0, row_y + clearance, 0.0]), np.array([0.0, -1.0, 0.0]))

    def signed_distance(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.point) @ self.normal


def check_collision(traj: Trajectory, obstacle: PlanarObstacle) -> Optional[int]:
    """Index of the first waypoint strictly behind the plane, or None."""
    bad = np.flatnonzero(obstacle.signed_distance(traj.positions) < 0)
    return int(bad[0]) if len(bad) else None


def trajectories_to_json(trajs: Sequence[Trajectory]) -> str:
    return json.dumps({"trajectories": [t.to_json() for t in trajs]}, indent=1)
