"""
Colour segmentation and clustering of crop points.

Colours are classified in rotated-HSV space (hue shifted by +90 degrees so red
does not straddle the 0/360 seam) with a diagonal Gaussian model; surviving
points are grouped by Euclidean connectivity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cloud import ColorPointCloud, NeighborIndex
from .errors import DegenerateSamples, NoClusters

HUE_ROTATION = 90.0
DEFAULT_CLUSTER_TOLERANCE = 0.002  # m, depth-camera resolution
DEFAULT_LOGLIK_MARGIN = 8.0  # threshold = const - 8, i.e. Mahalanobis radius 4
NEAR_TIE_FRACTION = 0.9


def rgb_to_rotated_hsv(rgb) -> np.ndarray:
    """RGB in [0,1] to rotated HSV ``(h deg, s, v)``; works on (3,) or (N,3).

    Achromatic colours get the conventional hue 0, i.e. 90 after rotation.
    """
    rgb = np.asarray(rgb, dtype=float)
    flat = rgb.reshape(-1, 3)
    r, g, b = flat[:, 0], flat[:, 1], flat[:, 2]
    v = flat.max(axis=1)
    c = v - flat.min(axis=1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe_c) % 6.0,
                 np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0))
    h = np.where(c > 0, h * 60.0, 0.0)
    h = (h + HUE_ROTATION) % 360.0
    out = np.stack([h, s, v], axis=1)
    return out.reshape(rgb.shape)


def rotated_hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse of :func:`rgb_to_rotated_hsv`."""
    hsv = np.asarray(hsv, dtype=float)
    flat = hsv.reshape(-1, 3)
    h = ((flat[:, 0] - HUE_ROTATION) % 360.0) / 60.0
    s, v = flat[:, 1], flat[:, 2]
    c = v * s
    x = c * (1 - np.abs(h % 2.0 - 1))
    sector = np.floor(h).astype(int) % 6
    z = np.zeros_like(c)
    table = [(c, x, z), (x, c, z), (z, c, x), (z, x, c), (x, z, c), (c, z, x)]
    rgb = np.zeros_like(flat)
    for k, (a, bb, cc) in enumerate(table):
        m = sector == k
        rgb[m] = np.stack([a[m], bb[m], cc[m]], axis=1)
    rgb += (v - c)[:, None]
    return np.clip(rgb, 0.0, 1.0).reshape(hsv.shape)


def wrap_degrees(d):
    """Wrap angle differences into (-180, 180]."""
    d = np.asarray(d, dtype=float)
    w = np.mod(d + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


@dataclass(frozen=True)
class GaussianColorModel:
    mu: tuple
    sigma_diag: tuple

    def __post_init__(self):
        mu = tuple(float(x) for x in self.mu)
        sig = tuple(float(x) for x in self.sigma_diag)
        if len(mu) != 3 or len(sig) != 3:
            raise ValueError("colour model is three-dimensional")
        if min(sig) <= 0:
            raise DegenerateSamples("all variances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_diag", sig)

    @property
    def precomputed_const(self) -> float:
        # -(d/2) log(2 pi) - 1/2 log det(Sigma), d = 3
        return -1.5 * math.log(2 * math.pi) - 0.5 * sum(math.log(s) for s in self.sigma_diag)

    def to_json(self) -> dict:
        return {"mu": list(self.mu), "sigma": list(self.sigma_diag)}

    @classmethod
    def from_json(cls, data: dict) -> "GaussianColorModel":
        return cls(tuple(data["mu"]), tuple(data["sigma"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GaussianColorModel":
        return cls.from_json(json.loads(Path(path).read_text()))


# ripe red crop: hue ~0 deg (90 rotated), saturated and moderately bright
DEFAULT_CROP_MODEL = GaussianColorModel(mu=(90.0, 0.85, 0.75), sigma_diag=(25.0, 0.0025, 0.0064))


@dataclass(frozen=True)
class SegmentationParams:
    """``loglik_threshold=None`` means ``model.precomputed_const - 8``."""

    loglik_threshold: Optional[float] = None
    min_saturation: float = 0.3
    min_value: float = 0.1

    def threshold_for(self, model: GaussianColorModel) -> float:
        if self.loglik_threshold is None:
            return model.precomputed_const - DEFAULT_LOGLIK_MARGIN
        return self.loglik_threshold


@dataclass(frozen=True)
class PepperCluster:
    ids: np.ndarray
    centroid: np.ndarray

    @property
    def point_count(self) -> int:
        return len(self.ids)


def fit_color_model(samples) -> GaussianColorModel:
    """Per-channel mean and unbiased variance; hue handled on the circle.

    Hue mean is the circular mean direction; hue variance is the unbiased
    variance of residuals wrapped about that mean, in degrees squared.
    """
    x = np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(x) < 2:
        raise DegenerateSamples("need at least two samples")
    ang = np.deg2rad(x[:, 0])
    mean_h = math.degrees(math.atan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360.0
    res_h = wrap_degrees(x[:, 0] - mean_h)
    var_h = float((res_h ** 2).sum() / (len(x) - 1))
    var_s = float(x[:, 1].var(ddof=1))
    var_v = float(x[:, 2].var(ddof=1))
    if min(var_h, var_s, var_v) <= 0:
        raise DegenerateSamples("zero variance in at least one channel")
    return GaussianColorModel((mean_h, float(x[:, 1].mean()), float(x[:, 2].mean())), (var_h, var_s, var_v))


def log_likelihood(model: GaussianColorModel, x):
    """Log density of rotated-HSV colour(s) ``x`` with wrapped hue residual."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, 3)
    mu = np.asarray(model.mu)
    r = flat - mu
    r[:, 0] = wrap_degrees(r[:, 0])
    maha = (r ** 2 / np.asarray(model.sigma_diag)).sum(axis=1)
    ll = model.precomputed_const - 0.5 * maha
    return float(ll[0]) if x.ndim == 1 else ll


def segment(cloud: ColorPointCloud, model: GaussianColorModel,
            params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    """Boolean crop mask: likelihood, saturation and value gates all pass."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    hsv = rgb_to_rotated_hsv(cloud.colors)
    ll = log_likelihood(model, hsv)
    thr = params.threshold_for(model)
    return (ll >= thr) & (hsv[:, 1] >= params.min_saturation) & (hsv[:, 2] >= params.min_value)


def euclidean_cluster(cloud: ColorPointCloud, mask, tolerance: float = DEFAULT_CLUSTER_TOLERANCE,
                      min_size: int = 1) -> list:
    """Connected components of masked points linked at distance <= tolerance.

    Components smaller than ``min_size`` are dropped; the result is sorted by
    size (descending), then by centroid x.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    ids = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(ids) == 0:
        return []
    pos = cloud.positions[ids]
    index = NeighborIndex(pos)
    lists = index.ball(pos, tolerance)
    rows = np.repeat(np.arange(len(ids)), [len(l) for l in lists])
    cols = np.concatenate(lists)
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(ids), len(ids)))
    _, labels = connected_components(graph, directed=False)
    clusters = []
    for lab in np.unique(labels):
        member = ids[labels == lab]
        if len(member) < min_size:
            continue
        clusters.append(PepperCluster(np.sort(member), cloud.positions[member].mean(axis=0)))
    clusters.sort(key=lambda c: (-c.point_count, float(c.centroid[0])))
    return clusters


def select_candidate(clusters: Sequence[PepperCluster], ee_position) -> int:
    """Index of the cluster to harvest next.

    The largest cluster wins unless others are within 10% of its size; among
    that near-tied set the centroid closest to the end effector wins.
    """
    if not clusters:
        raise NoClusters("no clusters to choose from")
    counts = np.array([c.point_count for c in clusters])
    leader = counts.max()
    tied = np.flatnonzero(counts >= NEAR_TIE_FRACTION * leader)
    ee = np.asarray(ee_position, dtype=float)
    dist = [float(np.linalg.norm(clusters[i].centroid - ee)) for i in tied]
    return int(tied[int(np.argmin(dist))])


def remove_outliers(cloud: ColorPointCloud, ids, radius: float, min_neighbors: int) -> np.ndarray:
    """Keep ids with at least ``min_neighbors`` other ids within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    ids = np.asarray(ids, dtype=int)
    if len(ids) == 0 or min_neighbors <= 0:
        return ids.copy()
    pos = cloud.positions[ids]
    lists = NeighborIndex(pos).ball(pos, radius)
    others = np.array([len(l) - 1 for l in lists])
    return ids[others >= min_neighbors]
