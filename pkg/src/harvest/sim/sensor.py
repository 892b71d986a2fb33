"""Point-based virtual depth camera with leaf and fruit occlusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..cloud import ColorPointCloud, RigidTransform
from ..planning.trajectories import Trajectory
from .scene import World


@dataclass(frozen=True)
class VirtualSensor:
    noise_sigma: float = 0.0  # m along the ray
    depth_resolution: float = 0.002
    min_range: float = 0.2
    max_range: float = 1.5
    fov_deg: tuple = (70.0, 55.0)  # full horizontal / vertical field of view
    max_views: int = 24  # frames kept from a scan

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.min_range < self.max_range:
            raise ValueError("need 0 <= min_range < max_range")
        if self.depth_resolution < 0:
            raise ValueError("depth_resolution must be non-negative")


@dataclass
class RenderStats:
    """Per-pepper point counts summed over views, with and without leaf occlusion."""

    visible: dict = field(default_factory=dict)
    unoccluded: dict = field(default_factory=dict)

    def visible_fraction(self, pid: int) -> float:
        total = self.unoccluded.get(pid, 0)
        return self.visible.get(pid, 0) / total if total else 0.0


def _leaf_blocked(origin, d, leaf):
    """Rays origin + s*d (0 < s < 1) that cross the leaf disk; points on the disk itself pass."""
    denom = d @ leaf.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((leaf.center - origin) @ leaf.normal) / denom
    ok = np.abs(denom) > 1e-12
    s = np.where(ok, s, -1.0)
    inside = (s > 1e-9) & (s < 1 - 1e-6)
    hit = origin + s[:, None] * d
    near = np.linalg.norm(hit - leaf.center, axis=1) <= leaf.radius
    return inside & near


def _sphere_blocked(origin, d, center, radius):
    """Rays whose open segment passes within ``radius`` of ``center``."""
    dd = np.einsum("ij,ij->i", d, d)
    s = (d @ (center - origin)) / dd
    closest = origin + np.clip(s, 0.0, 1.0)[:, None] * d
    return (np.linalg.norm(closest - center, axis=1) < radius) & (s > 0) & (s < 1)


def render_views(world: World, scan: Trajectory, sensor: VirtualSensor = VirtualSensor(),
                 rng: Optional[np.random.Generator] = None, crop_radius: Optional[float] = None,
                 return_stats: bool = False):
    """One sensor-frame cloud per kept scan pose, paired with its world-from-sensor pose.

    Points are visible when they face the camera, sit inside the field of view
    and range gate, and no leaf disk or other fruit lies on the ray. The range
    along each ray gets Gaussian noise and is then quantised.
    """
    if len(scan) == 0:
        raise ValueError("scan trajectory is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    poses = scan.poses(sensor.max_views)
    P, N, C, L, two = world.points, world.normals, world.colors, world.labels, world.two_sided
    leaves = list(world.spec.leaves)
    peppers = list(world.spec.peppers)
    if crop_radius is not None and len(P):
        mid = scan.positions.mean(axis=0)
        keep = np.linalg.norm(P - mid, axis=1) <= crop_radius
        P, N, C, L, two = P[keep], N[keep], C[keep], L[keep], two[keep]
        leaves = [l for l in leaves if np.linalg.norm(l.center - mid) <= crop_radius + l.radius]
        peppers = [p for p in peppers if np.linalg.norm(p.model.center - mid) <= crop_radius + max(p.model.a)]
    tan_h = math.tan(math.radians(sensor.fov_deg[0] / 2))
    tan_v = math.tan(math.radians(sensor.fov_deg[1] / 2))
    stats = RenderStats()
    out = []
    for pose in poses:
        c = pose.translation
        d = P - c
        local = d @ pose.rotation
        rng_dist = np.linalg.norm(d, axis=1)
        facing = np.einsum("ij,ij->i", N, -d)
        facing = np.where(two, np.abs(facing), facing) > 0
        cand = (facing & (local[:, 2] > 0) & (np.abs(local[:, 0]) <= tan_h * local[:, 2])
                & (np.abs(local[:, 1]) <= tan_v * local[:, 2])
                & (rng_dist >= sensor.min_range) & (rng_dist <= sensor.max_range))
        idx = np.flatnonzero(cand)
        dv = d[idx]
        # other fruit occlude through an inscribed sphere
        blocked = np.zeros(len(idx), bool)
        for p in peppers:
            other = L[idx] != p.id
            if other.any():
                r_in = min(p.model.a) * 0.95
                blocked[other] |= _sphere_blocked(c, dv[other], p.model.center, r_in)
        pre_leaf = ~blocked
        for leaf in leaves:
            blocked |= _leaf_blocked(c, dv, leaf)
        vis = idx[~blocked]
        for pid in np.unique(L[idx][pre_leaf]):
            if pid >= 0:
                stats.unoccluded[int(pid)] = stats.unoccluded.get(int(pid), 0) + int(np.sum(L[idx][pre_leaf] == pid))
        for pid in np.unique(L[vis]):
            if pid >= 0:
                stats.visible[int(pid)] = stats.visible.get(int(pid), 0) + int(np.sum(L[vis] == pid))
        loc = local[vis]
        r = rng_dist[vis]
        dirs = loc / r[:, None] if len(r) else loc
        if sensor.noise_sigma > 0:
            r = r + rng.normal(0.0, sensor.noise_sigma, len(r))
        if sensor.depth_resolution > 0:
            r = np.round(r / sensor.depth_resolution) * sensor.depth_resolution
        pts = dirs * r[:, None] if len(r) else np.zeros((0, 3))
        cloud = ColorPointCloud(pts, C[vis], viewpoint=np.zeros(3))
        out.append((cloud, pose))
    return (out, stats) if return_stats else out
