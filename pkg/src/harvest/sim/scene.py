"""
Synthetic crop scenes: pepper bodies with peduncles, leaf disks and thin
obstructions, plus dense coloured surface samples for rendering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..cloud import RigidTransform
from ..errors import InvalidSpec
from ..perception import rotated_hsv_to_rgb
from ..pose_estimation.superellipsoid import (
    SuperellipsoidModel,
    _implicit_local,
    ray_surface_distance,
    superellipsoid_implicit,
)

SURFACE_SPACING = 0.001  # m, upper bound on sample spacing
CALYX_RADIUS = 0.012
PEDUNCLE_RADIUS = 0.004

# colour distributions in rotated HSV: (mean, std) per channel
CROP_HSV = ((90.0, 5.0), (0.85, 0.05), (0.75, 0.08))
FOLIAGE_HSV = ((200.0, 8.0), (0.6, 0.08), (0.45, 0.08))
UNRIPE_HSV = ((185.0, 6.0), (0.7, 0.06), (0.5, 0.08))


@dataclass(frozen=True)
class PepperSpec:
    """One fruit. ``bumps`` is the amplitude of the radial lobing (0 = smooth)."""

    id: int
    model: SuperellipsoidModel
    peduncle_base: np.ndarray
    peduncle_tip: np.ndarray
    ripe: bool = True
    bumps: float = 0.0
    bump_phase: float = 0.0

    @property
    def irregular(self) -> bool:
        e = self.model.eps
        return self.bumps > 0 or any(x < 0.6 or x > 1.4 for x in e)

    def radial_ratio(self, p) -> np.ndarray:
        """Homogeneous degree-1 body function: < 1 inside, 1 on the surface.

        The distance from a point to the surface along its ray from the centre
        is ``|p - c| * (1 / ratio - 1)``.
        """
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = self.model.pose.inverse().apply(p)
        F = _implicit_local(q, self.model.a, self.model.eps)
        base = np.where(F > 0, F, 0.0) ** (self.model.eps[0] / 2.0)
        return base / bump_factor(q, self.bumps, self.bump_phase)

    def to_json(self) -> dict:
        m = self.model
        return {
            "id": self.id,
            "center": m.center.tolist(),
            "a": list(m.a),
            "eps": list(m.eps),
            "rotation": m.pose.rotation.tolist(),
            "peduncle_base": np.asarray(self.peduncle_base).tolist(),
            "peduncle_tip": np.asarray(self.peduncle_tip).tolist(),
            "ripe": self.ripe,
            "bumps": self.bumps,
            "bump_phase": self.bump_phase,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PepperSpec":
        R = np.array(d["rotation"]) if "rotation" in d else np.eye(3)
        model = SuperellipsoidModel(tuple(d["a"]), tuple(d.get("eps", (1.0, 1.0))),
                                    RigidTransform(R, np.array(d["center"])))
        base = np.array(d["peduncle_base"]) if "peduncle_base" in d else model_top(model)
        tip = np.array(d["peduncle_tip"]) if "peduncle_tip" in d else base + [0.0, 0.0, 0.05]
        return cls(int(d["id"]), model, base, tip, bool(d.get("ripe", True)),
                   float(d.get("bumps", 0.0)), float(d.get("bump_phase", 0.0)))


def bump_factor(q_local: np.ndarray, amplitude: float, phase: float = 0.0) -> np.ndarray:
    """Low-frequency radial lobing in the model frame; exactly 1 at the poles."""
    if amplitude == 0:
        return np.ones(len(q_local))
    r = np.linalg.norm(q_local, axis=1)
    r = np.where(r > 0, r, 1.0)
    lat = np.arcsin(np.clip(q_local[:, 2] / r, -1, 1))
    lon = np.arctan2(q_local[:, 1], q_local[:, 0])
    return 1.0 + amplitude * np.cos(lat) ** 2 * np.sin(3 * lon + phase) * np.cos(2 * lat + phase)


def model_top(model: SuperellipsoidModel) -> np.ndarray:
    """Surface point on the model's own +z axis (where the peduncle grows)."""
    axis = model.pose.rotation[:, 2]
    return model.center + ray_surface_distance(model, axis) * axis


@dataclass(frozen=True)
class LeafSpec:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))


@dataclass(frozen=True)
class Obstruction:
    """Thin string or stem segment; not seen by the sensor."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))


@dataclass(frozen=True)
class SceneSpec:
    peppers: tuple = ()
    leaves: tuple = ()
    obstructions: tuple = ()
    seed: int = 0

    def validate(self) -> None:
        ids = [p.id for p in self.peppers]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("pepper ids must be unique")
        for p in self.peppers:
            F = float(superellipsoid_implicit(p.model, np.asarray(p.peduncle_base)[None])[0])
            if abs(F - 1.0) > 1e-4:
                raise InvalidSpec(f"pepper {p.id}: peduncle base is off the surface (F={F:.6f})")
            if not 0 <= p.bumps < 0.5:
                raise InvalidSpec(f"pepper {p.id}: bump amplitude must lie in [0, 0.5)")
        for leaf in self.leaves:
            if leaf.radius <= 0:
                raise InvalidSpec("leaf radius must be positive")

    def pepper(self, pid: int) -> PepperSpec:
        for p in self.peppers:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "peppers": [p.to_json() for p in self.peppers],
            "leaves": [{"center": l.center.tolist(), "normal": l.normal.tolist(), "radius": l.radius}
                       for l in self.leaves],
            "obstructions": [{"a": o.a.tolist(), "b": o.b.tolist()} for o in self.obstructions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        try:
            spec = cls(
                tuple(PepperSpec.from_json(p) for p in d.get("peppers", [])),
                tuple(LeafSpec(l["center"], l["normal"], float(l["radius"])) for l in d.get("leaves", [])),
                tuple(Obstruction(o["a"], o["b"]) for o in d.get("obstructions", [])),
                int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad scene description: {exc}") from exc
        spec.validate()
        return spec

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


LEAF = -1
STEM = -2


@dataclass(frozen=True)
class World:
    """Ground-truth surface samples. ``labels`` hold pepper ids, LEAF or STEM."""

    spec: SceneSpec
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    two_sided: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def draw_colors(rng: np.random.Generator, n: int, dist) -> np.ndarray:
    hsv = np.column_stack([rng.normal(m, s, n) for m, s in dist])
    hsv[:, 0] %= 360.0
    hsv[:, 1:] = np.clip(hsv[:, 1:], 0.0, 1.0)
    return rotated_hsv_to_rgb(hsv)


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = k * math.pi * (3 - math.sqrt(5))
    r = np.sqrt(1 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def sample_pepper(p: PepperSpec, spacing: float = SURFACE_SPACING):
    """Surface points and outward normals of a pepper body."""
    m = p.model
    a_max = max(m.a) * (1 + p.bumps)
    n = int(math.ceil(1.6 * 4 * math.pi * a_max ** 2 / spacing ** 2))
    dirs = fibonacci_sphere(n)
    F = _implicit_local(dirs, m.a, m.eps)
    s = F ** (-m.eps[0] / 2.0) * bump_factor(dirs, p.bumps, p.bump_phase)
    local = dirs * s[:, None]
    pts = m.pose.apply(local)
    # outward normals by central differences of the radial body function
    h = 1e-6
    grad = np.zeros_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (p.radial_ratio(pts + e) - p.radial_ratio(pts - e)) / (2 * h)
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return pts, normals


def _disk_samples(center, normal, radius, spacing):
    u = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    g = np.arange(-radius, radius + spacing / 2, spacing)
    X, Y = np.meshgrid(g, g)
    keep = X ** 2 + Y ** 2 <= radius ** 2
    return center + X[keep][:, None] * u + Y[keep][:, None] * v


def _cylinder_samples(a, b, radius, spacing):
    axis = b - a
    L = np.linalg.norm(axis)
    if L == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    w = axis / L
    u = np.cross(w, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(w, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    t = np.arange(0, L + 1e-12, spacing)
    ang = np.linspace(0, 2 * np.pi, max(8, int(2 * np.pi * radius / spacing)), endpoint=False)
    T, A = np.meshgrid(t, ang)
    radial = np.cos(A.ravel())[:, None] * u + np.sin(A.ravel())[:, None] * v
    return a + T.ravel()[:, None] * w + radius * radial, radial


def generate_scene(spec: SceneSpec, spacing: float = SURFACE_SPACING) -> World:
    """Dense coloured ground truth; deterministic for a given ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    P, N, C, L, T = [], [], [], [], []
    for p in spec.peppers:
        pts, nrm = sample_pepper(p, spacing)
        colors = draw_colors(rng, len(pts), CROP_HSV if p.ripe else UNRIPE_HSV)
        calyx = np.linalg.norm(pts - p.peduncle_base, axis=1) <= CALYX_RADIUS
        colors[calyx] = draw_colors(rng, int(calyx.sum()), FOLIAGE_HSV)
        labels = np.full(len(pts), p.id)
        labels[calyx] = STEM
        P.append(pts); N.append(nrm); C.append(colors); L.append(labels); T.append(np.zeros(len(pts), bool))
        stem, stem_n = _cylinder_samples(np.asarray(p.peduncle_base, float), np.asarray(p.peduncle_tip, float),
                                         PEDUNCLE_RADIUS, spacing)
        P.append(stem); N.append(stem_n); C.append(draw_colors(rng, len(stem), FOLIAGE_HSV))
        L.append(np.full(len(stem), STEM)); T.append(np.zeros(len(stem), bool))
    for leaf in spec.leaves:
        pts = _disk_samples(leaf.center, leaf.normal, leaf.radius, spacing * 1.5)
        P.append(pts); N.append(np.repeat(leaf.normal[None], len(pts), axis=0))
        C.append(draw_colors(rng, len(pts), FOLIAGE_HSV))
        L.append(np.full(len(pts), LEAF)); T.append(np.ones(len(pts), bool))
    if not P:
        z = np.zeros((0, 3))
        return World(spec, z, z, z, np.zeros(0, int), np.zeros(0, bool))
    return World(spec, np.concatenate(P), np.concatenate(N), np.concatenate(C),
                 np.concatenate(L).astype(int), np.concatenate(T))


# ------------------------------------------------------------ scene builders

def make_pepper(pid: int, center, radius=0.04, a=None, eps=(1.0, 1.0), body_tilt_deg=0.0,
                peduncle_length=0.05, peduncle_tilt_deg=0.0, peduncle_azimuth_deg=0.0,
                bumps=0.0, bump_phase=0.0, ripe=True) -> PepperSpec:
    a = (radius, radius, radius * 1.1) if a is None else a
    pose = RigidTransform.from_rotvec([math.radians(body_tilt_deg), 0.0, 0.0], center)
    model = SuperellipsoidModel(tuple(a), tuple(eps), pose)
    base = model_top(model)
    t, az = math.radians(peduncle_tilt_deg), math.radians(peduncle_azimuth_deg)
    direction = np.array([math.sin(t) * math.cos(az), math.sin(t) * math.sin(az), math.cos(t)])
    return PepperSpec(pid, model, base, base + peduncle_length * direction, ripe, bumps, bump_phase)


def row_positions(n: int, rng: np.random.Generator, spacing: float = 0.6):
    xs = np.arange(n) * spacing
    zs = rng.uniform(0.9, 1.5, n)
    return [np.array([x, 0.0, z]) for x, z in zip(xs, zs)]


def easy_scene(n: int = 20, seed: int = 0) -> SceneSpec:
    """Unoccluded, upright, near-spherical peppers with vertical peduncles."""
    rng = np.random.default_rng(seed)
    peppers = []
    for i, c in enumerate(row_positions(n, rng)):
        r = rng.uniform(0.035, 0.045)
        peppers.append(make_pepper(i, c, a=(r, r, r * rng.uniform(1.0, 1.2))))
    return SceneSpec(tuple(peppers), seed=seed)


def hard_scene(n: int = 20, seed: int = 0) -> SceneSpec:
    """Mix of occluding leaves, strings across the approach, tilted peduncles and irregular shapes."""
    rng = np.random.default_rng(seed)
    peppers, leaves, strings = [], [], []
    for i, c in enumerate(row_positions(n, rng)):
        r = rng.uniform(0.035, 0.045)
        kind = i % 5
        if kind == 0:  # irregular body
            eps = (float(rng.choice([0.45, 1.55])), float(rng.uniform(0.8, 1.2)))
            peppers.append(make_pepper(i, c, a=(r, r, r * 1.1), eps=eps, bumps=0.25,
                                       bump_phase=float(rng.uniform(0, 2 * np.pi)),
                                       body_tilt_deg=float(rng.uniform(-20, 20))))
        elif kind == 1:  # tilted peduncle
            peppers.append(make_pepper(i, c, a=(r, r, r * 1.1), peduncle_tilt_deg=float(rng.uniform(30, 45)),
                                       peduncle_azimuth_deg=float(rng.choice([0.0, 180.0]))))
        elif kind == 2:  # leaf hanging in front of the fruit
            peppers.append(make_pepper(i, c, a=(r, r, r * 1.1)))
            leaves.append(LeafSpec(c + [0.0, -r - 0.03, 0.0], [0.0, -1.0, 0.0], 0.12))
        elif kind == 3:  # string across the approach
            peppers.append(make_pepper(i, c, a=(r, r, r * 1.1)))
            y = c[1] - r - 0.01
            strings.append(Obstruction(c + [-0.15, y - c[1], 0.01], c + [0.15, y - c[1], -0.01]))
        else:
            peppers.append(make_pepper(i, c, a=(r, r, r * 1.1)))
    return SceneSpec(tuple(peppers), tuple(leaves), tuple(strings), seed)
