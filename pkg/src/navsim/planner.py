"""Occupancy-grid global planning and reference-trajectory generation.

The grid is a plain boolean raster (cell occupied iff its center is inside
an obstacle; the robot shape is deliberately not inflated). Dijkstra runs
8-connected with sqrt(2) diagonal cost and deterministic (row, col)
tie-breaking; the resulting polyline is shortcut against the grid and
resampled into a constant-speed timed reference for the NMPC.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .geometry import Polytope, wrap_angle

__all__ = [
    "OccupancyGrid",
    "ReferenceTrajectory",
    "NoPath",
    "OutOfBounds",
    "rasterize",
    "dijkstra",
    "shortcut_path",
    "path_to_reference",
]

_SQRT2 = float(np.sqrt(2.0))
_NEIGHBORS = [
    (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
    (-1, -1, _SQRT2), (-1, 1, _SQRT2), (1, -1, _SQRT2), (1, 1, _SQRT2),
]


class NoPath(RuntimeError):
    """Goal unreachable on the grid."""


class OutOfBounds(ValueError):
    """Queried point lies outside the grid."""


@dataclass(frozen=True)
class OccupancyGrid:
    resolution: float
    origin: np.ndarray  # (2,) world coordinates of cell (0, 0)'s lower-left corner
    occupied: np.ndarray  # bool (rows, cols); row indexes y, col indexes x

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    def cell_center(self, row: int, col: int) -> np.ndarray:
        return self.origin + (np.array([col, row]) + 0.5) * self.resolution

    def point_to_cell(self, point) -> tuple[int, int]:
        p = np.asarray(point, dtype=float)
        col, row = np.floor((p - self.origin) / self.resolution).astype(int)
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise OutOfBounds(f"point {p} outside grid")
        return row, col

    def to_text(self) -> str:
        """Portable raster dump, one char per cell ('#' occupied, '.' free), row 0 at the bottom."""
        rows = ["".join("#" if o else "." for o in r) for r in self.occupied[::-1]]
        return "\n".join(rows)


def rasterize(obstacles: list[Polytope], bounds, resolution: float) -> OccupancyGrid:
    """Occupancy grid over bounds = (xmin, ymin, xmax, ymax).

    A cell is occupied iff its center lies inside any obstacle polytope; no
    robot-shape inflation is applied.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    xmin, ymin, xmax, ymax = map(float, bounds)
    cols = max(int(np.ceil((xmax - xmin) / resolution)), 1)
    rows = max(int(np.ceil((ymax - ymin) / resolution)), 1)
    origin = np.array([xmin, ymin])
    xs = xmin + (np.arange(cols) + 0.5) * resolution
    ys = ymin + (np.arange(rows) + 0.5) * resolution
    X, Y = np.meshgrid(xs, ys)
    centers = np.stack([X.ravel(), Y.ravel()], axis=1)
    occ = np.zeros(centers.shape[0], dtype=bool)
    for poly in obstacles:
        occ |= np.all(centers @ poly.A.T <= poly.b + 1e-12, axis=1)
    return OccupancyGrid(resolution, origin, occ.reshape(rows, cols))


def dijkstra(grid: OccupancyGrid, start, goal) -> np.ndarray:
    """Shortest 8-connected path between free cells, as (n, 2) cell centers.

    Diagonal steps cost sqrt(2) and are blocked when both flanking orthogonal
    cells are occupied. Ties break deterministically by (row, col).
    """
    srow, scol = grid.point_to_cell(start)
    grow, gcol = grid.point_to_cell(goal)
    occ = grid.occupied
    if occ[srow, scol] or occ[grow, gcol]:
        raise NoPath("start or goal cell occupied")
    dist = np.full(occ.shape, np.inf)
    dist[srow, scol] = 0.0
    prev: dict[tuple[int, int], tuple[int, int]] = {}
    heap = [(0.0, srow, scol)]
    while heap:
        d, r, c = heapq.heappop(heap)
        if (r, c) == (grow, gcol):
            break
        if d > dist[r, c]:
            continue
        for dr, dc, w in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < grid.height and 0 <= nc < grid.width) or occ[nr, nc]:
                continue
            if dr and dc and occ[r, nc] and occ[nr, c]:
                continue  # no squeezing between diagonal walls
            nd = d + w
            if nd < dist[nr, nc] - 1e-12:
                dist[nr, nc] = nd
                prev[(nr, nc)] = (r, c)
                heapq.heappush(heap, (nd, nr, nc))
    if not np.isfinite(dist[grow, gcol]):
        raise NoPath("goal unreachable")
    cells = [(grow, gcol)]
    while cells[-1] != (srow, scol):
        cells.append(prev[cells[-1]])
    cells.reverse()
    return np.array([grid.cell_center(r, c) for r, c in cells])


def _line_free(grid: OccupancyGrid, a: np.ndarray, b: np.ndarray) -> bool:
    """Conservatively sample the segment at sub-cell spacing."""
    n = max(int(np.ceil(np.linalg.norm(b - a) / (0.5 * grid.resolution))), 1)
    ts = np.linspace(0.0, 1.0, n + 1)
    for t in ts:
        p = a + t * (b - a)
        try:
            r, c = grid.point_to_cell(p)
        except OutOfBounds:
            return False
        if grid.occupied[r, c]:
            return False
    return True


def shortcut_path(grid: OccupancyGrid, path: np.ndarray) -> np.ndarray:
    """Greedy line-of-sight shortcutting of a grid path (keeps endpoints)."""
    if len(path) <= 2:
        return path
    out = [path[0]]
    i = 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not _line_free(grid, path[i], path[j]):
            j -= 1
        out.append(path[j])
        i = j
    return np.array(out)


@dataclass(frozen=True)
class ReferenceTrajectory:
    poses: np.ndarray  # (M, 3): x, y, yaw
    speeds: np.ndarray  # (M,)
    dt: float


def path_to_reference(
    path,
    speed: float,
    dt: float,
    horizon: int,
    final_yaw: float | None = None,
) -> ReferenceTrajectory:
    """Resample a path into a constant-speed timed reference.

    Samples are spaced so consecutive Euclidean gaps equal speed*dt, yaw is the
    direction of travel smoothed over adjacent segments, and the final pose is
    padded `horizon` extra times with speed 0. final_yaw overrides the yaw of
    the terminal samples (the commanded goal heading).
    """
    if speed <= 0 or dt <= 0:
        raise ValueError("speed and dt must be positive")
    pts = np.atleast_2d(np.asarray(path, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("empty path")
    step = speed * dt
    samples = [pts[0]]
    seg_i = 0
    pos = pts[0].copy()
    while seg_i < len(pts) - 1:
        # advance along the polyline until the chord from the last sample is `step`
        remaining = pts[seg_i + 1] - pos
        seg_len = np.linalg.norm(remaining)
        last = samples[-1]
        # find point q on [pos, pts[seg_i+1]] with |q - last| == step, if any
        d = remaining / seg_len if seg_len > 1e-12 else remaining
        w = pos - last
        b = w @ d
        c = w @ w - step * step
        disc = b * b - c
        t = -b + np.sqrt(disc) if disc >= 0 else np.inf
        if 0 <= t <= seg_len:
            pos = pos + t * d
            samples.append(pos.copy())
        else:
            pos = pts[seg_i + 1].copy()
            seg_i += 1
    if np.linalg.norm(pts[-1] - samples[-1]) > 1e-9:
        samples.append(pts[-1].copy())
    P = np.array(samples)
    M = P.shape[0]
    if M == 1:
        yaw = np.array([0.0 if final_yaw is None else final_yaw])
    else:
        seg = np.diff(P, axis=0)
        head = np.arctan2(seg[:, 1], seg[:, 0])
        head = np.unwrap(head)
        yaw = np.empty(M)
        yaw[0] = head[0]
        yaw[1:-1] = 0.5 * (head[:-1] + head[1:])
        yaw[-1] = head[-1] if final_yaw is None else final_yaw
    yaw = wrap_angle(yaw)
    speeds = np.full(M, speed)
    speeds[-1] = 0.0
    pad = np.repeat(P[-1][None, :], horizon, axis=0)
    pad_yaw = np.full(horizon, yaw[-1])
    poses = np.column_stack([np.vstack([P, pad]), np.concatenate([yaw, pad_yaw])])
    speeds = np.concatenate([speeds, np.zeros(horizon)])
    return ReferenceTrajectory(poses=poses, speeds=speeds, dt=dt)
