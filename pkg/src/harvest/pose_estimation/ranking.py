"""
Surface-normal grasp and cut candidates (grasp method 2).

Every cluster point with a valid normal is a candidate. Its utility is the
weighted sum of three scores in [0, 1]: flatness, distance from the cloud
boundary, and alignment of the normal with the horizontal plane (GRASP) or
with the vertical (CUT).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..cloud import DEFAULT_PATCH_RADIUS, ColorPointCloud, NeighborIndex
from ..errors import InvariantViolation, NoCandidatesAboveFloor, NoValidNormals
from .poses import ROW_NORMAL, CutPose, ScoredPose, level_orientation, upright_orientations

CURVATURE_CAP = 0.1
BOUNDARY_GAP = math.pi / 2
DEFAULT_BOUNDARY_RADIUS = 0.008  # m
DEFAULT_UTILITY_FLOOR = 0.5
DEFAULT_VERTICAL_OFFSET = 0.03  # m


class Mode(enum.Enum):
    GRASP = "grasp"
    CUT = "cut"


@dataclass(frozen=True)
class UtilityWeights:
    w1: float = 0.2  # curvature
    w2: float = 0.5  # boundary distance
    w3: float = 0.3  # horizontal (or vertical) alignment

    def __post_init__(self):
        w = self.as_array()
        if np.any(w < 0) or np.any(w > 1):
            raise InvariantViolation(f"weights {tuple(w)} must lie in [0, 1]")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InvariantViolation(f"weights {tuple(w)} must sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3], dtype=float)

    @classmethod
    def normalized(cls, w) -> "UtilityWeights":
        w = np.asarray(w, dtype=float)
        return cls(*(w / w.sum()))


DEFAULT_GRASP_WEIGHTS = UtilityWeights(0.2, 0.5, 0.3)
DEFAULT_CUT_WEIGHTS = UtilityWeights(0.1, 0.1, 0.8)


def utility(scores, weights: UtilityWeights) -> np.ndarray:
    """Weighted sum of scores; ``scores`` is (3,) or (N, 3)."""
    s = np.asarray(scores, dtype=float)
    u = s @ weights.as_array()
    if np.any(u < -1e-12) or np.any(u > 1 + 1e-12):
        raise InvariantViolation("utility left [0, 1]; scores must lie in [0, 1]")
    return u


def elevation(normals: np.ndarray) -> np.ndarray:
    """Angle between each normal and the horizontal plane, radians."""
    return np.arcsin(np.clip(np.asarray(normals)[..., 2], -1.0, 1.0))


def alignment_score(normals: np.ndarray, mode: Mode = Mode.GRASP) -> np.ndarray:
    """s3: GRASP favours horizontal normals, CUT vertical ones; the two always sum to 1."""
    tilt = (2.0 / np.pi) * np.abs(elevation(normals))
    return 1.0 - tilt if Mode(mode) is Mode.GRASP else tilt


def boundary_points(positions: np.ndarray, normals: np.ndarray, radius: float = DEFAULT_BOUNDARY_RADIUS,
                    gap: float = BOUNDARY_GAP) -> np.ndarray:
    """Mask of points whose tangent-projected neighbours leave an angular gap >= ``gap``.

    Points with fewer than three neighbours are boundary by definition.
    """
    n = len(positions)
    out = np.zeros(n, dtype=bool)
    if n == 0:
        return out
    lists = NeighborIndex(positions).ball(positions, radius)
    normals = np.asarray(normals, dtype=float)
    # tangent basis per point
    u = np.cross(normals, [1.0, 0.0, 0.0])
    weak = np.linalg.norm(u, axis=1) < 1e-6
    u[weak] = np.cross(normals[weak], [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    for i, nb in enumerate(lists):
        nb = nb[nb != i]
        if len(nb) < 3:
            out[i] = True
            continue
        d = positions[nb] - positions[i]
        ang = np.sort(np.arctan2(d @ v[i], d @ u[i]))
        gaps = np.diff(ang)
        out[i] = max(gaps.max(), ang[0] + 2 * np.pi - ang[-1]) >= gap
    return out


def candidate_scores(cloud: ColorPointCloud, ids, mode: Mode = Mode.GRASP,
                     boundary_radius: float = DEFAULT_BOUNDARY_RADIUS,
                     boundary_scale: Optional[float] = None):
    """Per-candidate ids and the (N, 3) score matrix.

    ``boundary_scale`` normalises the boundary distance; by default it is the
    largest boundary distance in the cluster, so the most interior point
    scores 1. Pass the patch radius to saturate at that distance instead.
    In CUT mode only upward-facing points are candidates, since the blade
    comes from above the fruit.
    """
    if not cloud.has_normals:
        raise NoValidNormals("cloud has no normals")
    ids = np.asarray(ids, dtype=int)
    ids = ids[cloud.normal_valid[ids]]
    mode = Mode(mode)
    if mode is Mode.CUT:
        ids = ids[cloud.normals[ids, 2] >= 0]
    if len(ids) == 0:
        raise NoValidNormals("no cluster point has a valid normal")
    pos = cloud.positions[ids]
    nrm = cloud.normals[ids]
    s1 = 1.0 - np.minimum(1.0, cloud.curvature[ids] / CURVATURE_CAP)
    edge = boundary_points(pos, nrm, boundary_radius)
    if edge.any():
        d, _ = NeighborIndex(pos[edge]).nearest(pos)
    else:
        d = np.full(len(ids), np.inf)
    if boundary_scale is None:
        finite = d[np.isfinite(d)]
        boundary_scale = finite.max() if len(finite) and finite.max() > 0 else 1.0
    s2 = np.minimum(1.0, d / boundary_scale)
    s3 = alignment_score(nrm, mode)
    return ids, np.clip(np.stack([s1, s2, s3], axis=1), 0.0, 1.0)


def score_candidates(cloud: ColorPointCloud, cluster_ids, weights: UtilityWeights = DEFAULT_GRASP_WEIGHTS,
                     mode: Mode = Mode.GRASP, **kw) -> list:
    """Scored candidate poses sorted by utility (descending), ties by point id.

    The approach axis is the inward normal; each pose is rolled about it so
    the tool up-axis is as close to world z as possible.
    """
    ids, S = candidate_scores(cloud, cluster_ids, Mode(mode), **kw)
    U = utility(S, weights)
    R = upright_orientations(-cloud.normals[ids])
    order = np.lexsort((ids, -U))
    return [ScoredPose(cloud.positions[ids[k]].copy(), R[k], float(S[k, 0]), float(S[k, 1]),
                       float(S[k, 2]), float(U[k]), int(ids[k])) for k in order]


def estimate_cut_pose(candidates: Sequence[ScoredPose], utility_floor: float = DEFAULT_UTILITY_FLOOR,
                      vertical_offset: float = DEFAULT_VERTICAL_OFFSET, row_normal=ROW_NORMAL) -> CutPose:
    """Per-axis median of candidates at or above the utility floor, raised by the offset."""
    keep = [c.position for c in candidates if c.utility >= utility_floor]
    if not keep:
        raise NoCandidatesAboveFloor(f"no cut candidate reaches utility {utility_floor}")
    pos = np.median(np.asarray(keep), axis=0)
    pos[2] += vertical_offset
    return CutPose(pos, level_orientation(row_normal))
