"""
Colour point clouds: container, ASCII PLY/PCD IO, radius queries, normals
and pose-known multi-view merging.

World frame convention: x runs along the crop row, y points from the robot
toward the row, z is up.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (
    EmptyCloud,
    EmptyInput,
    InconsistentRowCount,
    IoFailure,
    MalformedHeader,
    NonFiniteValue,
)

DEFAULT_PATCH_RADIUS = 0.025  # m, surface-normal patch size used for grasp ranking
DEFAULT_VOXEL = 0.002  # m, matches the depth resolution of the sensor


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidTransform:
    """World-from-local rigid transform ``p_world = R @ p_local + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not np.all(np.isfinite(t)):
            raise NonFiniteValue("translation must be finite")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        R = Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()
        # re-orthonormalise so the 1e-9 invariants hold exactly
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class ColorPointCloud:
    """Immutable colour point cloud.

    ``normals``, ``normal_valid`` and ``curvature`` are either all ``None`` or
    per-point arrays filled in by :func:`estimate_normals`.
    """

    positions: np.ndarray
    colors: np.ndarray
    normals: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None
    curvature: Optional[np.ndarray] = None
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(pos) != len(col):
            raise ValueError("positions and colors differ in length")
        if not np.all(np.isfinite(pos)):
            raise NonFiniteValue("cloud positions must be finite")
        if np.any(col < 0.0) or np.any(col > 1.0):
            raise ValueError("color channels must lie in [0, 1]")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "colors", _frozen(col))
        object.__setattr__(self, "viewpoint", _frozen(np.asarray(self.viewpoint, dtype=float).reshape(3)))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pos):
                raise ValueError("normals must be parallel to points")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must have unit length")
            valid = (np.ones(len(pos), dtype=bool) if self.normal_valid is None
                     else np.asarray(self.normal_valid, dtype=bool).reshape(-1))
            curv = (np.zeros(len(pos)) if self.curvature is None
                    else np.asarray(self.curvature, dtype=float).reshape(-1))
            object.__setattr__(self, "normals", _frozen(nrm))
            object.__setattr__(self, "normal_valid", _frozen(valid))
            object.__setattr__(self, "curvature", _frozen(curv))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, ids) -> "ColorPointCloud":
        ids = np.asarray(ids, dtype=int)
        kw = {}
        if self.has_normals:
            kw = dict(normals=self.normals[ids], normal_valid=self.normal_valid[ids],
                      curvature=self.curvature[ids])
        return ColorPointCloud(self.positions[ids], self.colors[ids], viewpoint=self.viewpoint, **kw)

    def transformed(self, tf: RigidTransform) -> "ColorPointCloud":
        kw = {}
        if self.has_normals:
            kw = dict(normals=tf.apply_vectors(self.normals), normal_valid=self.normal_valid,
                      curvature=self.curvature)
        return ColorPointCloud(tf.apply(self.positions), self.colors,
                               viewpoint=tf.apply(self.viewpoint), **kw)

    @classmethod
    def empty(cls) -> "ColorPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))


class NeighborIndex:
    """Read-only kd-tree over cloud positions; safe for concurrent queries."""

    def __init__(self, positions: np.ndarray):
        self.positions = _frozen(np.asarray(positions, dtype=float).reshape(-1, 3))
        self._tree = cKDTree(self.positions)

    @classmethod
    def of(cls, cloud: ColorPointCloud) -> "NeighborIndex":
        return cls(cloud.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def ball(self, queries: np.ndarray, r: float) -> list:
        """Unordered neighbour lists for many queries (exact ``<= r`` test)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        raw = self._tree.query_ball_point(queries, r * (1 + 1e-9) + 1e-12)
        counts = np.fromiter((len(c) for c in raw), dtype=int, count=len(raw))
        if counts.sum() == 0:
            return [np.zeros(0, dtype=int) for _ in raw]
        flat = np.fromiter((j for c in raw for j in c), dtype=int, count=int(counts.sum()))
        owner = np.repeat(np.arange(len(raw)), counts)
        d = np.sqrt(((self.positions[flat] - queries[owner]) ** 2).sum(axis=1))
        keep = d <= r
        kept = np.bincount(owner[keep], minlength=len(raw))
        return np.split(flat[keep], np.cumsum(kept)[:-1])

    def nearest(self, queries: np.ndarray):
        return self._tree.query(np.atleast_2d(queries))


def radius_neighbors(index: NeighborIndex, query, r: float) -> list:
    """Ids of all points within ``r`` of ``query``, nearest first, ties by id."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    q = np.asarray(query, dtype=float).reshape(3)
    if len(index) == 0:
        return []
    cand = index.ball(q[None, :], r)[0]
    if len(cand) == 0:
        return []
    d = np.sqrt(((index.positions[cand] - q) ** 2).sum(axis=1))
    order = np.lexsort((cand, d))
    return [int(i) for i in cand[order]]


def _neighbor_pairs(index: NeighborIndex, queries: np.ndarray, r: float):
    """Flattened (owner, neighbour) arrays for each query's ball, self included."""
    lists = index._tree.query_ball_point(queries, r)
    counts = np.fromiter((len(n) for n in lists), dtype=int, count=len(lists))
    nbr = np.fromiter((j for n in lists for j in n), dtype=int, count=int(counts.sum()))
    owner = np.repeat(np.arange(len(lists)), counts)
    return owner, nbr, counts


def _patch_moments(pos: np.ndarray, index: NeighborIndex, ids: np.ndarray, r: float):
    """Neighbour counts and patch covariances for the points ``ids``."""
    owner, nbr, counts = _neighbor_pairs(index, pos[ids], r)
    d = pos[nbr] - pos[ids][owner]  # centred on the query point for conditioning
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    s1 = np.add.reduceat(d, starts, axis=0)
    s2 = np.add.reduceat(d[:, :, None] * d[:, None, :], starts, axis=0)
    mean = s1 / counts[:, None]
    return counts, s2 / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]


def estimate_normals(cloud: ColorPointCloud, patch_radius: float = DEFAULT_PATCH_RADIUS,
                     viewpoint=None, max_pairs: int = 2_000_000) -> ColorPointCloud:
    """PCA normals and curvature over a fixed-radius patch.

    The normal is the covariance eigenvector of the smallest eigenvalue,
    flipped to face the viewpoint; curvature is ``l0 / (l0 + l1 + l2)``.
    Points whose patch holds fewer than 3 points are flagged invalid and get
    a placeholder unit normal pointing at the viewpoint. Work is chunked so
    that roughly ``max_pairs`` neighbour pairs are held at once.
    """
    if patch_radius <= 0:
        raise ValueError("patch_radius must be positive")
    vp = cloud.viewpoint if viewpoint is None else np.asarray(viewpoint, dtype=float)
    n = len(cloud)
    pos = cloud.positions
    normals = np.zeros((n, 3))
    curvature = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    if n:
        index = NeighborIndex(pos)
        probe = index._tree.query_ball_point(pos[:: max(1, n // 200)], patch_radius, return_length=True)
        chunk = max(1, int(max_pairs / max(1.0, float(np.mean(probe)))))
        counts = np.zeros(n, dtype=int)
        cov = np.zeros((n, 3, 3))
        for lo in range(0, n, chunk):
            ids = np.arange(lo, min(n, lo + chunk))
            counts[ids], cov[ids] = _patch_moments(pos, index, ids, patch_radius)
        w, v = np.linalg.eigh(cov)
        w = np.clip(w, 0.0, None)
        total = w.sum(axis=1)
        valid = (counts >= 3) & (total > 0)
        normals = v[:, :, 0]
        curvature = np.where(total > 0, w[:, 0] / np.where(total > 0, total, 1.0), 0.0)
        to_view = vp - pos
        flip = np.einsum("ij,ij->i", normals, to_view) < 0
        normals[flip] *= -1
        if not valid.all():
            fallback = to_view[~valid]
            norm = np.linalg.norm(fallback, axis=1, keepdims=True)
            fallback = np.where(norm > 0, fallback / np.where(norm > 0, norm, 1), [0.0, 0.0, 1.0])
            normals[~valid] = fallback
            curvature[~valid] = 0.0
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(cloud, normals=normals, normal_valid=valid, curvature=curvature, viewpoint=vp)


def voxel_downsample(positions: np.ndarray, colors: np.ndarray, voxel: float):
    """Centroid position and mean colour per occupied voxel, ordered by voxel key."""
    keys = np.floor(positions / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    out_p = np.zeros((len(uniq), 3))
    out_c = np.zeros((len(uniq), 3))
    for k in range(3):
        out_p[:, k] = np.bincount(inverse, weights=positions[:, k], minlength=len(uniq)) / counts
        out_c[:, k] = np.bincount(inverse, weights=colors[:, k], minlength=len(uniq)) / counts
    return out_p, np.clip(out_c, 0.0, 1.0)


def merge_views(views: Sequence[tuple], voxel: float = DEFAULT_VOXEL) -> ColorPointCloud:
    """Fuse sensor-frame views with known world-from-sensor poses.

    Stand-in for online registration: transform, concatenate, then keep one
    centroid per voxel. The merged viewpoint is the centroid of the view
    origins.
    """
    if not views:
        raise EmptyInput("no views to merge")
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts, cols = [], []
    for cloud, tf in views:
        pts.append(tf.apply(cloud.positions))
        cols.append(cloud.colors)
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    viewpoint = np.mean([tf.translation for _, tf in views], axis=0)
    if len(pts) == 0:
        return ColorPointCloud(pts, cols, viewpoint=viewpoint)
    p, c = voxel_downsample(pts, cols, voxel)
    return ColorPointCloud(p, c, viewpoint=viewpoint)


# ---------------------------------------------------------------- file IO

def _pack_rgb(colors: np.ndarray) -> np.ndarray:
    c = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint32)
    return (c[:, 0] << 16) | (c[:, 1] << 8) | c[:, 2]


def _unpack_rgb(packed: np.ndarray) -> np.ndarray:
    packed = packed.astype(np.uint32)
    return np.stack([(packed >> 16) & 255, (packed >> 8) & 255, packed & 255], axis=1) / 255.0


def _float_bits(values: Iterable[float]) -> np.ndarray:
    return np.array([struct.unpack("<I", struct.pack("<f", v))[0] for v in values], dtype=np.uint32)


def _bits_to_float(bits: np.ndarray) -> list:
    return [struct.unpack("<f", struct.pack("<I", int(b)))[0] for b in bits]


def _format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def save_cloud(cloud: ColorPointCloud, path, format: Optional[str] = None,
               extra_fields: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Write ``cloud`` as ASCII PLY or PCD (v0.7) with 6-decimal coordinates.

    ``extra_fields`` are appended as additional per-point columns, e.g. a
    0/1 segmentation label.
    """
    if len(cloud) == 0:
        raise EmptyCloud("refusing to write an empty cloud")
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("ply", "pcd"):
        raise ValueError(f"unknown cloud format {fmt!r}")
    extra = {k: np.asarray(v).reshape(-1) for k, v in (extra_fields or {}).items()}
    for k, v in extra.items():
        if len(v) != len(cloud):
            raise ValueError(f"extra field {k!r} has wrong length")
    n = len(cloud)
    pos = cloud.positions
    lines = []
    if fmt == "ply":
        rgb = np.round(cloud.colors * 255).astype(int)
        lines += ["ply", "format ascii 1.0", f"element vertex {n}",
                  "property float x", "property float y", "property float z",
                  "property uchar red", "property uchar green", "property uchar blue"]
        for k, v in extra.items():
            lines.append(f"property {'int' if np.issubdtype(v.dtype, np.integer) or v.dtype == bool else 'float'} {k}")
        lines.append("end_header")
        cols = [rgb[:, 0], rgb[:, 1], rgb[:, 2]]
    else:
        packed = _pack_rgb(cloud.colors)
        rgbf = _bits_to_float(packed)
        names = ["x", "y", "z", "rgb"] + list(extra)
        types = ["F", "F", "F", "F"] + ["I" if (np.issubdtype(v.dtype, np.integer) or v.dtype == bool) else "F"
                                        for v in extra.values()]
        vp = cloud.viewpoint
        lines += ["# .PCD v0.7 - Point Cloud Data file format", "VERSION 0.7",
                  "FIELDS " + " ".join(names), "SIZE " + " ".join("4" for _ in names),
                  "TYPE " + " ".join(types), "COUNT " + " ".join("1" for _ in names),
                  f"WIDTH {n}", "HEIGHT 1",
                  f"VIEWPOINT {vp[0]:.6f} {vp[1]:.6f} {vp[2]:.6f} 1 0 0 0",
                  f"POINTS {n}", "DATA ascii"]
        cols = [np.array([repr(v) for v in rgbf], dtype=object)]
    extras = [v.astype(int) if v.dtype == bool else v for v in extra.values()]
    for i in range(n):
        row = [f"{pos[i, 0]:.6f}", f"{pos[i, 1]:.6f}", f"{pos[i, 2]:.6f}"]
        row += [c[i] if isinstance(c[i], str) else _format_value(c[i]) for c in cols]
        row += [_format_value(v[i]) for v in extras]
        lines.append(" ".join(row))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _parse_rows(rows: list, ncols: int, path) -> np.ndarray:
    try:
        data = np.array([[float(x) for x in r.split()] for r in rows], dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise MalformedHeader(f"{path}: unparsable data row ({exc})") from exc
    if len(rows) and data.shape[1] != ncols:
        raise MalformedHeader(f"{path}: rows have {data.shape[1]} columns, header declares {ncols}")
    return data


def _read_ply(lines: list, path):
    if not lines or lines[0].strip() != "ply":
        raise MalformedHeader(f"{path}: missing 'ply' magic")
    elements = []  # [name, count, [props]]
    end = None
    for i, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MalformedHeader(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader(f"{path}: property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None:
        raise MalformedHeader(f"{path}: missing end_header")
    body = [r for r in lines[end + 1:] if r.strip()]
    declared = sum(e[1] for e in elements)
    if len(body) != declared:
        raise InconsistentRowCount(f"{path}: header declares {declared} rows, found {len(body)}")
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            data = _parse_rows(body[offset:offset + count], len(props), path)
            return props, data, np.zeros(3)
        offset += count
    raise MalformedHeader(f"{path}: no vertex element")


def _read_pcd(lines: list, path):
    header = {}
    end = None
    for i, raw in enumerate(lines):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        header[tok[0].upper()] = tok[1:]
        if tok[0].upper() == "DATA":
            end = i
            break
    if end is None:
        raise MalformedHeader(f"{path}: missing DATA line")
    if header["DATA"][0].lower() != "ascii":
        raise MalformedHeader(f"{path}: only ASCII PCD is supported")
    if "FIELDS" not in header:
        raise MalformedHeader(f"{path}: missing FIELDS")
    names = header["FIELDS"]
    counts = [int(c) for c in header.get("COUNT", ["1"] * len(names))]
    if any(c != 1 for c in counts):
        raise MalformedHeader(f"{path}: multi-count fields are not supported")
    types = header.get("TYPE", ["F"] * len(names))
    body = [r for r in lines[end + 1:] if r.strip()]
    if "POINTS" in header:
        declared = int(header["POINTS"][0])
    else:
        declared = int(header.get("WIDTH", ["0"])[0]) * int(header.get("HEIGHT", ["1"])[0])
    if len(body) != declared:
        raise InconsistentRowCount(f"{path}: header declares {declared} points, found {len(body)}")
    data = _parse_rows(body, len(names), path)
    for rgb_name in ("rgb", "rgba"):
        if rgb_name in names:
            j = names.index(rgb_name)
            if types[j].upper() == "F":
                # packed float: reinterpret the float32 bit pattern
                data[:, j] = _float_bits(data[:, j]).astype(float)
    vp = np.zeros(3)
    if "VIEWPOINT" in header:
        vp = np.array([float(v) for v in header["VIEWPOINT"][:3]])
    return names, data, vp


def load_cloud_with_fields(path):
    """Load a cloud plus a dict of any non-geometry, non-colour columns."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
        names, data, vp = _read_ply(lines, path)
    else:
        names, data, vp = _read_pcd(lines, path)
    if not all(k in names for k in ("x", "y", "z")):
        raise MalformedHeader(f"{path}: field list lacks x/y/z")
    data = data.reshape(-1, len(names))
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{path}: non-finite value in data")
    col = {k: data[:, names.index(k)] for k in names}
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1)
    used = {"x", "y", "z"}
    if "rgb" in col or "rgba" in col:
        key = "rgb" if "rgb" in col else "rgba"
        colors = _unpack_rgb(col[key].astype(np.uint64))
        used.add(key)
    elif all(k in col for k in ("red", "green", "blue")):
        rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1)
        colors = rgb / 255.0 if rgb.max(initial=0) > 1.0 else rgb
        used |= {"red", "green", "blue"}
    else:
        colors = np.zeros_like(pos)
    extras = {k: v for k, v in col.items() if k not in used}
    return ColorPointCloud(pos, np.clip(colors, 0, 1), viewpoint=vp), extras


def load_cloud(path) -> ColorPointCloud:
    """Load an ASCII PLY or PCD file; one point per data row, file order."""
    return load_cloud_with_fields(path)[0]
