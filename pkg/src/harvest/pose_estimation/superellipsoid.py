"""
Superellipsoid model fitting (grasp method 1).

The model is fitted with a hand-rolled Levenberg-Marquardt loop on the
volume-weighted radial residual ``sqrt(a1 a2 a3) * (F**eps1 - 1)``, which keeps
the fit from inflating the model to swallow noisy points.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..cloud import RigidTransform
from ..errors import DegenerateCluster
from .poses import ROW_NORMAL, CutPose, ScoredPose, level_orientation, upright_orientation

log = logging.getLogger(__name__)

AXIS_BOUNDS = (0.005, 0.3)
EPS_BOUNDS = (0.1, 1.9)
MIN_POINTS = 50
MIN_PCA_EIGENVALUE = 1e-8  # m^2


@dataclass(frozen=True)
class SuperellipsoidModel:
    a: tuple
    eps: tuple
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    converged: bool = True

    def __post_init__(self):
        a = tuple(float(x) for x in self.a)
        eps = tuple(float(x) for x in self.eps)
        if len(a) != 3 or len(eps) != 2:
            raise ValueError("need three semi-axes and two exponents")
        if not all(AXIS_BOUNDS[0] - 1e-12 <= x <= AXIS_BOUNDS[1] + 1e-12 for x in a):
            raise ValueError(f"semi-axes {a} outside {AXIS_BOUNDS}")
        if not all(EPS_BOUNDS[0] - 1e-12 <= x <= EPS_BOUNDS[1] + 1e-12 for x in eps):
            raise ValueError(f"exponents {eps} outside {EPS_BOUNDS}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "eps", eps)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def to_json(self) -> dict:
        return {
            "a": list(self.a),
            "eps": list(self.eps),
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "converged": self.converged,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SuperellipsoidModel":
        return cls(tuple(d["a"]), tuple(d["eps"]),
                   RigidTransform(np.array(d["rotation"]), np.array(d["translation"])),
                   bool(d.get("converged", True)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _implicit_local(q: np.ndarray, a, eps) -> np.ndarray:
    a1, a2, a3 = a
    e1, e2 = eps
    x = np.abs(q[..., 0] / a1)
    y = np.abs(q[..., 1] / a2)
    z = np.abs(q[..., 2] / a3)
    xy = x ** (2.0 / e2) + y ** (2.0 / e2)
    return xy ** (e2 / e1) + z ** (2.0 / e1)


def superellipsoid_implicit(model: SuperellipsoidModel, p) -> np.ndarray:
    """Inside-outside function: 1 on the surface, < 1 inside, > 1 outside."""
    p = np.asarray(p, dtype=float)
    q = model.pose.inverse().apply(p.reshape(-1, 3)).reshape(p.shape)
    return _implicit_local(q, model.a, model.eps)


def ray_surface_distance(model: SuperellipsoidModel, direction) -> float:
    """Distance from the model centre to the surface along ``direction``.

    ``F`` is homogeneous in the model frame, ``F(s q) = s**(2/eps1) F(q)``,
    so the crossing has the closed form ``s = F(q)**(-eps1/2)``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    q = model.pose.rotation.T @ d
    return float(_implicit_local(q, model.a, model.eps) ** (-model.eps[0] / 2.0))


def radial_surface_point(model: SuperellipsoidModel, p) -> np.ndarray:
    """Project world point(s) radially (from the centre) onto the surface."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    c = model.center
    F = superellipsoid_implicit(model, p)
    scale = np.where(F > 0, F, 1.0) ** (-model.eps[0] / 2.0)
    return c + (p - c) * scale[:, None]


def surface_normal(model: SuperellipsoidModel, p, h: float = 1e-6) -> np.ndarray:
    """Outward unit normal (gradient of F) at world point(s) ``p``."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    grad = np.zeros_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (superellipsoid_implicit(model, p + e) - superellipsoid_implicit(model, p - e)) / (2 * h)
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)


def sample_surface(a, eps, n_eta: int, n_omega: int, pose: RigidTransform | None = None) -> np.ndarray:
    """Points from the parametric form on an (eta, omega) grid."""
    eta = np.linspace(-np.pi / 2, np.pi / 2, n_eta)
    omega = np.linspace(-np.pi, np.pi, n_omega, endpoint=False)
    E, W = np.meshgrid(eta, omega, indexing="ij")
    return parametric_points(a, eps, E.ravel(), W.ravel(), pose)


def parametric_points(a, eps, eta, omega, pose: RigidTransform | None = None) -> np.ndarray:
    def spow(v, e):
        return np.sign(v) * np.abs(v) ** e

    e1, e2 = eps
    ce, se = np.cos(eta), np.sin(eta)
    x = a[0] * spow(ce, e1) * spow(np.cos(omega), e2)
    y = a[1] * spow(ce, e1) * spow(np.sin(omega), e2)
    z = a[2] * spow(se, e1)
    pts = np.stack([x, y, z], axis=1)
    return pts if pose is None else pose.apply(pts)


# ----------------------------------------------------------------- fitting

def _unpack(theta, R0):
    a = theta[0:3]
    eps = theta[3:5]
    R = R0 @ Rotation.from_rotvec(theta[5:8]).as_matrix()
    t = theta[8:11]
    return a, eps, R, t


def _residuals(theta, pts, R0):
    a, eps, R, t = _unpack(theta, R0)
    q = (pts - t) @ R
    F = _implicit_local(q, a, eps)
    return np.sqrt(a[0] * a[1] * a[2]) * (F ** eps[0] - 1.0)


def _clamp(theta):
    theta = theta.copy()
    theta[0:3] = np.clip(theta[0:3], *AXIS_BOUNDS)
    theta[3:5] = np.clip(theta[3:5], *EPS_BOUNDS)
    return theta


def _jacobian(theta, pts, R0, r0):
    J = np.empty((len(pts), len(theta)))
    for k in range(len(theta)):
        h = 1e-7 * max(1.0, abs(theta[k])) if k >= 5 else 1e-7 * max(abs(theta[k]), 1e-3)
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = (_residuals(tp, pts, R0) - _residuals(tm, pts, R0)) / (2 * h)
    return J


@dataclass(frozen=True)
class FitReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def initial_guess(points: np.ndarray):
    """PCA frame at the centroid, half-extents along the PCA axes, eps = (1, 1)."""
    c = points.mean(axis=0)
    w, v = np.linalg.eigh(np.cov((points - c).T))
    if w[0] <= MIN_PCA_EIGENVALUE:
        raise DegenerateCluster(f"cluster is planar or linear (smallest PCA eigenvalue {w[0]:.3g} m^2)")
    # order axes by decreasing spread, model z along the axis closest to world up
    R = v[:, ::-1].copy()
    k = int(np.argmax(np.abs(R[2, :])))
    order = [i for i in range(3) if i != k] + [k]
    R = R[:, order]
    if R[2, 2] < 0:
        R[:, 2] *= -1
    if np.linalg.det(R) < 0:
        R[:, 0] *= -1
    q = (points - c) @ R
    half = 0.5 * (q.max(axis=0) - q.min(axis=0))
    theta = np.concatenate([np.clip(half, *AXIS_BOUNDS), [1.0, 1.0], np.zeros(3), c])
    return theta, R


def fit_superellipsoid(points, max_iter: int = 200, rtol: float = 1e-8,
                       return_report: bool = False):
    """Fit a superellipsoid to cluster points by damped least squares.

    Raises DegenerateCluster for fewer than 50 points or a flat/linear
    cluster. If the iteration cap is hit the best model so far is returned
    with ``converged=False`` and a RuntimeWarning.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < MIN_POINTS:
        raise DegenerateCluster(f"need at least {MIN_POINTS} points, got {len(pts)}")
    theta, R0 = initial_guess(pts)
    r = _residuals(theta, pts, R0)
    cost = float(r @ r)
    initial_cost = cost
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(theta, pts, R0, r)
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        for _ in range(12):
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = _clamp(theta + step)
            rc = _residuals(cand, pts, R0)
            cc = float(rc @ rc)
            if np.isfinite(cc) and cc < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True  # no descent direction left
            break
        rel = (cost - cc) / max(cost, 1e-300)
        theta, r, cost = cand, rc, cc
        lam = max(lam / 10, 1e-12)
        if rel < rtol or cost == 0.0:
            converged = True
            break
    a, eps, R, t = _unpack(theta, R0)
    u, _, vt = np.linalg.svd(R)
    model = SuperellipsoidModel(tuple(a), tuple(eps), RigidTransform(u @ vt, t), converged)
    if not converged:
        warnings.warn("superellipsoid fit hit the iteration cap", RuntimeWarning, stacklevel=2)
    log.debug("superellipsoid fit: cost %.3g -> %.3g in %d iterations", initial_cost, cost, it)
    if return_report:
        return model, FitReport(initial_cost, cost, it, converged)
    return model


def fit_cost(model: SuperellipsoidModel, points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    q = model.pose.inverse().apply(pts)
    F = _implicit_local(q, model.a, model.eps)
    r = np.sqrt(np.prod(model.a)) * (F ** model.eps[0] - 1.0)
    return float(r @ r)


# ----------------------------------------------------------- model poses

def grasp_from_model(model: SuperellipsoidModel, row_normal=ROW_NORMAL) -> ScoredPose:
    """Suction pose at the centre of the front face.

    ``row_normal`` points from the robot into the row; the grasp point is
    where the ray from the model centre back toward the robot leaves the
    surface, and the approach runs along ``row_normal``.
    """
    n = np.asarray(row_normal, dtype=float)
    n = n / np.linalg.norm(n)
    s = ray_surface_distance(model, -n)
    pos = model.center - s * n
    return ScoredPose(pos, upright_orientation(n), 1.0, 1.0, 1.0, 1.0)


def cut_from_model(model: SuperellipsoidModel, vertical_offset: float = 0.03,
                   row_normal=ROW_NORMAL) -> CutPose:
    """Level cut pose above the top of the model along world +z."""
    up = np.array([0.0, 0.0, 1.0])
    s = ray_surface_distance(model, up)
    pos = model.center + (s + vertical_offset) * up
    return CutPose(pos, level_orientation(row_normal))
