"""Geometric primitives: frames, point clouds, meshes, fiducials and transforms.

All coordinates are meters. Arrays are stored as read-only float64 ``(n, 3)``
numpy arrays so that instances can be shared freely.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

FRAMES = ("camera", "specimen-scan", "cavity", "marker", "phantom-world")


class GeometryError(ValueError):
    pass


def _frozen(a, dtype=np.float64, shape_tail=(3,)) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise GeometryError(f"expected array of shape (n, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_frame(frame: str) -> str:
    if frame not in FRAMES:
        raise GeometryError(f"unknown frame {frame!r}; expected one of {', '.join(FRAMES)}")
    return frame


@dataclass(frozen=True, eq=False)
class PointCloud:
    frame: str
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "frame", _check_frame(self.frame))
        pts = _frozen(self.points)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            colors = _frozen(self.colors)
            if len(colors) != len(pts):
                raise GeometryError("colors length does not match points")
            if np.any(colors < 0.0) or np.any(colors > 1.0):
                raise GeometryError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", colors)
        if self.normals is not None:
            normals = _frozen(self.normals)
            if len(normals) != len(pts):
                raise GeometryError("normals length does not match points")
            if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-6):
                raise GeometryError("normals must have unit norm")
            object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points, frame: Optional[str] = None) -> "PointCloud":
        return PointCloud(frame or self.frame, points, self.colors, None)


@dataclass(frozen=True, eq=False)
class TriMesh:
    frame: str
    vertices: np.ndarray
    faces: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "frame", _check_frame(self.frame))
        verts = _frozen(self.vertices)
        if not np.all(np.isfinite(verts)):
            raise GeometryError("vertex coordinates must be finite")
        faces = _frozen(self.faces, dtype=np.int64)
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(verts):
                raise GeometryError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
                raise GeometryError("degenerate face")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(verts):
                raise GeometryError("labels length does not match vertices")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def with_vertices(self, vertices, frame: Optional[str] = None) -> "TriMesh":
        """Same topology and labels, new vertex positions."""
        return TriMesh(frame or self.frame, vertices, self.faces, self.labels)


@dataclass(frozen=True, eq=False)
class FiducialSet:
    frame: str
    labels: tuple
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frame", _check_frame(self.frame))
        labels = tuple(str(l) for l in self.labels)
        if len(set(labels)) != len(labels):
            raise GeometryError("fiducial labels must be unique")
        pos = _frozen(self.positions)
        if len(pos) != len(labels):
            raise GeometryError("fiducial labels and positions differ in length")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("fiducial positions must be finite")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.labels)

    def corresponds(self, other: "FiducialSet") -> bool:
        return self.labels == other.labels

    def position(self, label: str) -> np.ndarray:
        return self.positions[self.labels.index(label)]

    def subset(self, labels: Sequence[str]) -> "FiducialSet":
        idx = [self.labels.index(l) for l in labels]
        return FiducialSet(self.frame, tuple(labels), self.positions[idx])


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("rotation is not a proper orthonormal matrix")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        d = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        if not np.all(np.isfinite(d)):
            raise GeometryError("translation must be finite")
        R.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", d)

    scale = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m, reproject: bool = True) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix.

        With ``reproject`` the rotation block is snapped to the nearest proper
        rotation (polar decomposition); deviations above 1e-6 are logged.
        """
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected 4x4 matrix, got {m.shape}")
        R = m[:3, :3]
        if reproject:
            dev = np.max(np.abs(R.T @ R - np.eye(3)))
            if dev > 1e-6:
                log.warning("rotation deviates from orthonormal by %.3g; re-projecting", dev)
            R = nearest_rotation(R)
        return cls(R, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = float(self.scale)
        if not np.isfinite(s) or s <= 0:
            raise GeometryError("scale must be positive")
        R = np.array(self.rotation, dtype=np.float64)
        d = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        R.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", d)

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation


Transform = Union[RigidTransform, SimilarityTransform]


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius norm."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def apply_transform(t: Transform, p) -> np.ndarray:
    """s*R*p + d for a single point or an (n, 3) array."""
    return t.apply(p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    R = nearest_rotation(a.rotation @ b.rotation)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T.copy()
    return RigidTransform(Rt, -Rt @ t.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return nearest_rotation(R)


def random_rigid(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3))


class NeighborIndex:
    """KD-tree over a fixed point set; ties resolve to the lowest index."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("empty target")
        self.points = pts
        self._tree = cKDTree(pts)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        # Ask for two neighbours so exact distance ties can be broken by index.
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.reshape(-1), dist.reshape(-1)
        best = idx[:, 0].copy()
        # rare exact ties: rescan those rows so the lowest index wins
        for i in np.nonzero(dist[:, 1] == dist[:, 0])[0]:
            d = np.sqrt(np.sum((self.points - q[i]) ** 2, axis=1))
            best[i] = int(np.flatnonzero(d == d.min())[0])
        return best, dist[:, 0]


def nearest_neighbor(query, cloud: Union[PointCloud, np.ndarray]) -> tuple[int, float]:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(pts) == 0:
        raise GeometryError("empty target")
    idx, dist = NeighborIndex(pts).query(query)
    return int(idx[0]), float(dist[0])


def brute_force_nearest(query, points) -> tuple[int, float]:
    """Exhaustive linear scan; reference for the KD-tree path."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("empty target")
    d = np.sqrt(np.sum((pts - np.asarray(query, dtype=np.float64)) ** 2, axis=1))
    i = int(np.argmin(d))
    return i, float(d[i])


def farthest_point_sampling(points, k: int, seed: int = 0) -> np.ndarray:
    """Indices of ``k`` points chosen greedily to maximise coverage."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def closest_points_on_triangles(p, a, b, c) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on each triangle (a, b, c) to the matching query ``p``.

    All inputs are ``(n, 3)``. Returns the points and their barycentric
    coordinates ``(n, 3)`` with respect to (a, b, c). Region tests follow
    Ericson, Real-Time Collision Detection, section 5.1.5.
    """
    p, a, b, c = (np.asarray(v, dtype=np.float64) for v in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def put(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if np.ndim(w) == 2 else w
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        put((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        put((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.column_stack([1 - v, v, np.zeros(n)]))
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.column_stack([1 - w, np.zeros(n), w]))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.column_stack([np.zeros(n), 1 - w, w]))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(n, dtype=bool), np.column_stack([1 - v - w, v, w]))
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


class MeshProximity:
    """Approximate closest-point queries onto a deforming triangle mesh.

    Candidate faces are those incident to the ``n_vertices`` nearest vertices
    of the current shape, plus an optional per-query face hint (the previous
    correspondence), so a re-query is never worse than the hint.
    """

    def __init__(self, faces, n_vertices: int = 4):
        self.faces = np.asarray(faces, dtype=np.int64)
        nv = int(self.faces.max()) + 1
        inc = [[] for _ in range(nv)]
        for f, tri in enumerate(self.faces):
            for v in tri:
                inc[v].append(f)
        width = max(len(x) for x in inc)
        self.incident = np.full((nv, width), -1, dtype=np.int64)
        for v, fl in enumerate(inc):
            self.incident[v, : len(fl)] = fl
        self.n_vertices = n_vertices
        # only vertices referenced by some face can yield candidates
        self.used = np.unique(self.faces)

    def query(self, vertices, points, hint=None):
        """Return (face index, barycentric, closest point, distance) per query point."""
        V = np.asarray(vertices, dtype=np.float64)
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        k = min(self.n_vertices, len(self.used))
        _, near = cKDTree(V[self.used]).query(P, k=k)
        near = self.used[near.reshape(len(P), k)]
        cand = self.incident[near].reshape(len(P), -1)
        if hint is not None:
            cand = np.column_stack([np.asarray(hint, dtype=np.int64), cand])
        valid = cand >= 0
        rows, cols = np.nonzero(valid)
        fidx = cand[rows, cols]
        tri = V[self.faces[fidx]]
        q, bary = closest_points_on_triangles(P[rows], tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = np.sum((q - P[rows]) ** 2, axis=1)
        full = np.full(cand.shape, np.inf)
        full[rows, cols] = d2
        # lowest distance; ties go to the earliest candidate (the hint, when given)
        best = np.argmin(full, axis=1)
        sel = np.full(cand.shape, -1, dtype=np.int64)
        sel[rows, cols] = np.arange(len(rows))
        pick = sel[np.arange(len(P)), best]
        return fidx[pick], bary[pick], q[pick], np.sqrt(d2[pick])


def brute_force_closest_on_mesh(vertices, faces, point) -> tuple[int, np.ndarray, float]:
    """Exhaustive closest point over every triangle; reference for :class:`MeshProximity`."""
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces, dtype=np.int64)
    P = np.repeat(np.asarray(point, dtype=np.float64).reshape(1, 3), len(F), axis=0)
    q, _ = closest_points_on_triangles(P, V[F[:, 0]], V[F[:, 1]], V[F[:, 2]])
    d = np.linalg.norm(q - P, axis=1)
    i = int(np.argmin(d))
    return i, q[i], float(d[i])
