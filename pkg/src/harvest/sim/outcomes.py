"""Geometric surrogates for suction attachment and peduncle cutting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..planning.fsm import SensorEvent
from ..planning.trajectories import Trajectory
from ..pose_estimation.poses import ScoredPose
from .scene import PepperSpec, World

APPROACH_CHECK = 0.02  # m of final approach swept by the suction disk


@dataclass(frozen=True)
class OutcomeModel:
    suction_radius: float = 0.015
    max_normal_angle: float = 30.0  # deg
    blade_halfwidth: float = 0.03
    blade_window: float = 0.01
    damage_margin: float = 0.005

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class AttachResult:
    event: SensorEvent
    pepper_id: Optional[int]
    notes: tuple = ()

    @property
    def attached(self) -> bool:
        return self.event is SensorEvent.PressureAttached


@dataclass(frozen=True)
class DetachResult:
    success: bool
    notes: tuple = ()

    @property
    def code(self) -> str:
        return "S" if self.success else "F"


def segment_distance(p0, p1, q0, q1) -> float:
    """Closest distance between segments p0-p1 and q0-q1."""
    p0, p1, q0, q1 = (np.asarray(v, dtype=float) for v in (p0, p1, q0, q1))
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    if a <= 1e-18 and e <= 1e-18:
        return float(np.linalg.norm(r))
    if a <= 1e-18:
        s, t = 0.0, float(np.clip(f / e, 0, 1))
    else:
        c = d1 @ r
        if e <= 1e-18:
            t, s = 0.0, float(np.clip(-c / a, 0, 1))
        else:
            b = d1 @ d2
            den = a * e - b * b
            s = float(np.clip((b * f - c * e) / den, 0, 1)) if den > 1e-18 else 0.0
            t = (b * s + f) / e
            if t < 0:
                t, s = 0.0, float(np.clip(-c / a, 0, 1))
            elif t > 1:
                t, s = 1.0, float(np.clip((b - c) / a, 0, 1))
    return float(np.linalg.norm((p0 + s * d1) - (q0 + t * d2)))


def surface_gap(pepper: PepperSpec, p) -> float:
    """Radial distance from ``p`` to the pepper surface (positive outside)."""
    p = np.asarray(p, dtype=float)
    ratio = float(pepper.radial_ratio(p[None])[0])
    r = float(np.linalg.norm(p - pepper.model.center))
    return r - r / ratio if ratio > 0 else -math.inf


def outward_normal(pepper: PepperSpec, p, h: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    g = np.array([(pepper.radial_ratio(p + e)[0] - pepper.radial_ratio(p - e)[0]) / (2 * h)
                  for e in np.eye(3) * h])
    return g / np.linalg.norm(g)


def nearest_pepper(world: World, p) -> Optional[PepperSpec]:
    if not world.spec.peppers:
        return None
    return min(world.spec.peppers, key=lambda q: abs(surface_gap(q, p)))


def simulate_attach(grasp: ScoredPose, world: World, outcome: OutcomeModel = OutcomeModel(),
                    pepper_id: Optional[int] = None) -> AttachResult:
    """Suction succeeds on the nearest (or given) pepper when the cup is on its
    surface, roughly normal to it, and no obstruction cuts the final approach."""
    p = np.asarray(grasp.position, dtype=float)
    a = grasp.approach
    seg0 = p - APPROACH_CHECK * a
    for ob in world.spec.obstructions:
        if segment_distance(seg0, p, ob.a, ob.b) <= outcome.suction_radius:
            return AttachResult(SensorEvent.PressureLost, pepper_id, ("OB",))
    pepper = world.spec.pepper(pepper_id) if pepper_id is not None else nearest_pepper(world, p)
    if pepper is None:
        return AttachResult(SensorEvent.PressureLost, None)
    # the cup must seal on the fruit, not hover in front of it
    if abs(surface_gap(pepper, p)) > outcome.suction_radius:
        return AttachResult(SensorEvent.PressureLost, pepper.id)
    inward = -outward_normal(pepper, p)
    angle = math.degrees(math.acos(float(np.clip(a @ inward, -1.0, 1.0))))
    if angle > outcome.max_normal_angle:
        return AttachResult(SensorEvent.PressureLost, pepper.id)
    return AttachResult(SensorEvent.PressureAttached, pepper.id)


def blade_samples(traj: Trajectory, halfwidth: float, step: float = 0.002) -> np.ndarray:
    """Points on the area swept by a level blade of the given half width."""
    pts = []
    for k in range(len(traj)):
        lateral = traj.orientations[k][:, 1]
        off = np.arange(-halfwidth, halfwidth + step / 2, step)
        pts.append(traj.positions[k] + off[:, None] * lateral)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def simulate_detach(traj: Trajectory, pepper: PepperSpec, outcome: OutcomeModel = OutcomeModel()) -> DetachResult:
    """Cut succeeds when the blade centreline passes within ``blade_window`` of the
    peduncle; blade penetration into the fruit body adds MD or XD."""
    if len(traj) == 0:
        return DetachResult(False)
    gap = segment_distance(traj.positions[0], traj.positions[-1], pepper.peduncle_base, pepper.peduncle_tip)
    notes = []
    pts = blade_samples(traj, outcome.blade_halfwidth)
    ratio = pepper.radial_ratio(pts)
    inside = ratio < 1
    if inside.any():
        r = np.linalg.norm(pts[inside] - pepper.model.center, axis=1)
        depth = float(np.max(r / np.maximum(ratio[inside], 1e-12) - r))
        notes.append("XD" if depth > outcome.damage_margin else "MD")
    return DetachResult(gap <= outcome.blade_window, tuple(notes))
