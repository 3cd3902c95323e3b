"""2D polytope geometry: convex hulls, halfspace forms, pose transforms, clustering.

Polytopes are stored in halfspace form {y : A y <= b} with unit-norm rows,
so each b entry is the signed offset of its facet from the origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

logger = logging.getLogger(__name__)

__all__ = [
    "DegenerateInput",
    "Point2",
    "Pose2",
    "Polytope",
    "wrap_angle",
    "rotation_matrix",
    "hull_2d",
    "transform_polytope",
    "cluster_points",
    "vertices_of",
    "box_polytope",
]


class DegenerateInput(ValueError):
    """Points do not span a 2D region (single point or collinear set)."""


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("Point2 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Pose2:
    position: Point2
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @classmethod
    def from_xytheta(cls, x: float, y: float, theta: float) -> "Pose2":
        return cls(Point2(float(x), float(y)), float(theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.position.x, self.position.y, self.heading])


def _as_points(points) -> np.ndarray:
    if len(points) and isinstance(points[0], Point2):
        return np.array([[p.x, p.y] for p in points])
    return np.asarray(points, dtype=float).reshape(-1, 2)


class Polytope:
    """Bounded convex 2D polytope {y : A y <= b} with unit-norm facet rows."""

    __slots__ = ("A", "b")

    def __init__(self, A, b, normalize: bool = True):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if A.shape[0] != b.shape[0] or A.shape[1] != 2:
            raise ValueError(f"inconsistent halfspace shapes {A.shape} vs {b.shape}")
        if A.shape[0] < 3:
            raise ValueError("2D polytope needs at least 3 facets")
        if normalize:
            norms = np.linalg.norm(A, axis=1)
            if np.any(norms < 1e-12):
                raise ValueError("zero facet normal")
            A = A / norms[:, None]
            b = b / norms
        A.setflags(write=False)
        b.setflags(write=False)
        self.A = A
        self.b = b

    @property
    def s(self) -> int:
        """Facet count."""
        return self.A.shape[0]

    def contains(self, points, tol: float = 1e-9):
        """Membership test for one point or an (n, 2) array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.all(pts @ self.A.T <= self.b + tol, axis=1)
        return inside if pts.shape[0] > 1 else bool(inside[0])

    def __repr__(self):
        return f"Polytope(s={self.s})"


def _halfspaces_from_ccw(V: np.ndarray) -> Polytope:
    """Halfspace form of a convex polygon given counterclockwise vertices."""
    d = np.roll(V, -1, axis=0) - V
    normals = np.stack([d[:, 1], -d[:, 0]], axis=1)
    lens = np.linalg.norm(normals, axis=1)
    normals /= lens[:, None]
    offsets = np.einsum("ij,ij->i", normals, V)
    return Polytope(normals, offsets, normalize=False)


def hull_2d(points) -> Polytope:
    """Convex hull of a point set, as a halfspace polytope with CCW facet order.

    Raises DegenerateInput when the hull collapses to a point or segment.
    """
    pts = _as_points(points)
    if pts.shape[0] < 3:
        raise DegenerateInput("need at least 3 points")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateInput("hull is degenerate (collinear or coincident points)") from exc
    V = pts[hull.vertices]  # CCW in 2D
    return _halfspaces_from_ccw(V)


def transform_polytope(body: Polytope, pose: Pose2) -> Polytope:
    """Map a body-frame polytope to the world frame of the given pose.

    y in body  <=>  R y + t in result, realized as A' = A R^T, b' = b + A R^T t.
    """
    R = rotation_matrix(pose.heading)
    t = pose.position.as_array()
    A_new = body.A @ R.T
    b_new = body.b + A_new @ t
    return Polytope(A_new, b_new, normalize=False)


def vertices_of(p: Polytope) -> np.ndarray:
    """Vertices of a polytope in counterclockwise order, shape (m, 2).

    Enumerates facet-pair intersections and keeps the feasible ones, so the
    facet rows need not be ordered.
    """
    A, b, s = p.A, p.b, p.s
    pts = []
    for i in range(s):
        for j in range(i + 1, s):
            M = np.array([A[i], A[j]])
            det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            if abs(det) < 1e-12:
                continue
            v = np.linalg.solve(M, np.array([b[i], b[j]]))
            if np.all(A @ v <= b + 1e-8):
                pts.append(v)
    if not pts:
        raise ValueError("polytope has no vertices (empty or unbounded)")
    pts = np.array(pts)
    # Dedupe and order CCW around the centroid.
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = [pts[0]]
    for q in pts[1:]:
        if np.linalg.norm(q - keep[-1]) > 1e-8:
            keep.append(q)
    pts = np.array(keep)
    c = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    return pts[np.argsort(ang)]


def _reduce_vertices(V: np.ndarray, max_vertices: int) -> np.ndarray:
    """Simplify a CCW convex polygon to at most max_vertices vertices.

    Repeatedly replaces the adjacent vertex pair whose removal (substituting
    the intersection of the flanking supporting lines) adds the least area.
    The result is an outer approximation of the input polygon.
    """
    V = V.copy()
    while len(V) > max_vertices:
        m = len(V)
        best = None  # (area, i, q)
        for i in range(m):
            a, p1, p2, c = V[(i - 1) % m], V[i], V[(i + 1) % m], V[(i + 2) % m]
            d1, d2 = p1 - a, p2 - c
            det = d1[0] * (-d2[1]) - (-d2[0]) * d1[1]
            if abs(det) < 1e-12:
                continue  # flanking edges parallel
            rhs = p2 - p1
            t1 = (rhs[0] * (-d2[1]) - (-d2[0]) * rhs[1]) / det
            t2 = (d1[0] * rhs[1] - rhs[0] * d1[1]) / det
            if t1 <= 0 or t2 <= 0:
                continue  # lines meet on the wrong side
            q = p1 + t1 * d1
            area = 0.5 * abs(np.cross(q - p1, p2 - p1))
            if best is None or area < best[0]:
                best = (area, i, q)
        if best is None:
            logger.warning("cannot simplify polygon below %d vertices", len(V))
            break
        _, i, q = best
        m = len(V)
        if i < m - 1:
            V = np.delete(V, [i, i + 1], axis=0)
            V = np.insert(V, i, q, axis=0)
        else:  # pair wraps around the end
            V = np.delete(V, [m - 1, 0], axis=0)
            V = np.vstack([V, q])
    return V


def cluster_points(points, link_radius: float, max_vertices: int) -> list[Polytope]:
    """Cluster points by single-linkage Euclidean distance into hull polytopes.

    Two points are linked when within link_radius. Each cluster of at least 3
    non-collinear points yields a convex-hull polytope, simplified to at most
    max_vertices vertices by an outer approximation. Degenerate clusters are
    dropped (logged).
    """
    if link_radius <= 0:
        raise ValueError("link_radius must be positive")
    if max_vertices < 3:
        raise ValueError("max_vertices must be at least 3")
    pts = _as_points(points)
    if pts.shape[0] == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(link_radius, output_type="ndarray")
    n = pts.shape[0]
    graph = sparse.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])) if len(pairs) else ((), ((), ())),
        shape=(n, n),
    )
    n_comp, labels = connected_components(graph, directed=False)
    polys = []
    dropped = 0
    for c in range(n_comp):
        cluster = pts[labels == c]
        if cluster.shape[0] < 3:
            dropped += 1
            continue
        try:
            poly = hull_2d(cluster)
        except DegenerateInput:
            dropped += 1
            continue
        V = vertices_of(poly)
        if len(V) > max_vertices:
            V = _reduce_vertices(V, max_vertices)
            poly = _halfspaces_from_ccw(V)
        polys.append(poly)
    if dropped:
        logger.warning("dropped %d degenerate clusters", dropped)
    return polys


def box_polytope(length: float, width: float, center=(0.0, 0.0)) -> Polytope:
    """Axis-aligned rectangle (length along x, width along y) as a polytope."""
    cx, cy = center
    hx, hy = length / 2.0, width / 2.0
    V = np.array([[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]])
    return _halfspaces_from_ccw(V)
