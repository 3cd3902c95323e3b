"""Closed-loop simulation, benchmarking and solver-timing studies.

A trial runs synchronous MPC: plan a grid path, resample it into a timed
reference, then loop select-obstacles -> NMPC solve -> apply the first input
through the true dynamics. Collision is adjudicated every executed step by
the geometric oracle (signed polytope distance), never by the solver.
Benchmarks rejection-sample start/goal poses from a seeded generator so the
same pose pairs are replayed for every controller mode.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import PlanarRigid, Unicycle
from .geometry import Polytope, Pose2, box_polytope, cluster_points, hull_2d, transform_polytope, vertices_of, wrap_angle
from .distance import signed_distance
from .nmpc import (
    AvoidanceMode,
    BarrierConfig,
    NmpcController,
    SolveStatus,
    Weights,
    circumscribed_circle,
    select_obstacles,
)
from .planner import NoPath, dijkstra, path_to_reference, rasterize, shortcut_path

__all__ = [
    "Scenario",
    "ScenarioInvalid",
    "Outcome",
    "TrialResult",
    "BenchmarkRow",
    "ModeSummary",
    "BenchmarkReport",
    "TimingRow",
    "run_closed_loop",
    "run_benchmark",
    "timing_study",
    "make_model",
    "default_weights",
]

_DEADLOCK_WINDOW_S = 5.0
_DEADLOCK_DISP_M = 0.05
_REF_MAX_AHEAD_M = 0.8  # hold the reference clock when the robot lags this far


class ScenarioInvalid(ValueError):
    """Scenario fails validation (shapes, parameters, or start/goal in collision)."""


class Outcome(str, enum.Enum):
    REACHED_GOAL = "ReachedGoal"
    COLLISION = "Collision"
    DEADLOCK = "Deadlock"
    TIMEOUT = "Timeout"


def make_model(model_id: str, dt: float):
    if model_id == "unicycle":
        return Unicycle(dt=dt)
    if model_id == "planar_rigid":
        return PlanarRigid(dt=dt)
    raise ScenarioInvalid(f"unknown dynamics model {model_id!r}")


def default_weights(model) -> Weights:
    if model.state_dim == 3:
        return Weights(
            Q=np.diag([20.0, 20.0, 2.0]),
            R=np.diag([1.0, 0.5]),
            Qf=np.diag([40.0, 40.0, 4.0]),
        )
    return Weights(
        Q=np.diag([20.0, 20.0, 2.0, 0.5, 0.5, 0.1]),
        R=np.diag([0.2, 0.2, 0.1]),
        Qf=np.diag([40.0, 40.0, 4.0, 1.0, 1.0, 0.2]),
    )


@dataclass
class Scenario:
    """World, robot, task and controller configuration for one trial."""

    obstacles: list[Polytope]
    robot_body: Polytope
    start: np.ndarray  # (3,) x, y, yaw
    goal: np.ndarray  # (3,)
    model: str = "unicycle"
    mode: AvoidanceMode = AvoidanceMode.EXP_DCBF_DUALITY
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    N: int = 15
    dt: float = 0.05
    weights: Weights | None = None
    speed: float = 0.5
    timeout: float = 60.0
    seed: int = 0
    points: np.ndarray | None = None  # raw point sets, clustered into obstacles
    cluster_radius: float = 0.3
    max_vertices: int = 15
    bounds: tuple[float, float, float, float] | None = None
    grid_resolution: float = 0.05
    goal_tolerance: float = 0.15
    selection_box_half: float = 0.5
    max_selected: int = 4
    start_box: tuple[float, float, float, float] | None = None  # benchmark sampling region
    goal_box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.goal = np.asarray(self.goal, dtype=float).reshape(3)
        if self.points is not None and len(self.points) > 0:
            extra = cluster_points(self.points, self.cluster_radius, self.max_vertices)
            self.obstacles = list(self.obstacles) + extra
            self.points = None
        if self.N < 1 or self.dt <= 0 or self.speed <= 0 or self.timeout <= 0:
            raise ScenarioInvalid("N, dt, speed and timeout must be positive")
        if self.grid_resolution <= 0 or self.selection_box_half <= 0:
            raise ScenarioInvalid("grid_resolution and selection_box_half must be positive")
        if self.bounds is None:
            self.bounds = self._auto_bounds()

    def _auto_bounds(self) -> tuple[float, float, float, float]:
        pts = [self.start[:2], self.goal[:2]]
        for obs in self.obstacles:
            pts.append(vertices_of(obs).min(axis=0))
            pts.append(vertices_of(obs).max(axis=0))
        P = np.array(pts)
        lo = P.min(axis=0) - 1.0
        hi = P.max(axis=0) + 1.0
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def clearance(self, pose) -> float:
        """Oracle signed clearance of the robot at `pose` over all obstacles."""
        body = transform_polytope(self.robot_body, _to_pose2(pose))
        if not self.obstacles:
            return math.inf
        return min(signed_distance(body, obs) for obs in self.obstacles)

    def validate(self):
        if self.clearance(self.goal) <= 0.0:
            raise ScenarioInvalid("goal pose collides with an obstacle")
        # a penetrating start is legitimate when signed-distance recovery is on
        if not self.barrier.signed_distance and self.clearance(self.start) <= 0.0:
            raise ScenarioInvalid("start pose collides with an obstacle")


@dataclass
class TrialResult:
    states: np.ndarray  # (T+1, nx) executed states
    inputs: np.ndarray  # (T, nu)
    min_dists: np.ndarray  # (T+1,) oracle signed distance at each executed state
    solve_ms: np.ndarray  # (T,)
    outcome: Outcome
    travel_time: float

    @property
    def min_clearance(self) -> float:
        return float(self.min_dists.min()) if self.min_dists.size else math.inf


def _to_pose2(pose) -> Pose2:
    p = np.asarray(pose, dtype=float)
    return Pose2.from_xytheta(p[0], p[1], p[2])


def _snap_free(grid, xy) -> np.ndarray:
    """Nearest free cell center; planning may start from a penetrating pose."""
    r, c = grid.point_to_cell(xy)
    if not grid.occupied[r, c]:
        return np.asarray(xy, dtype=float)
    free = np.argwhere(~grid.occupied)
    if free.size == 0:
        raise ScenarioInvalid("occupancy grid is fully occupied")
    centers = np.array([grid.cell_center(rr, cc) for rr, cc in free])
    return centers[np.argmin(np.linalg.norm(centers - np.asarray(xy), axis=1))]


def _densify(path: np.ndarray, spacing: float) -> np.ndarray:
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        for j in range(1, n + 1):
            out.append(a + (b - a) * j / n)
    return np.array(out)


def _tracking_clearance(sc: Scenario):
    """Clearance metric the controller can actually honor while tracking.

    Duality modes respect the true polytope gap; the Euclidean modes keep the
    circumscribed circles apart, so their references must be repaired against
    that (inflated) metric — which is precisely why spherical approximation
    loses narrow passages.
    """
    if sc.mode.uses_duality:
        return sc.clearance
    c_r, r_r = circumscribed_circle(sc.robot_body)
    centers = []
    radii = []
    for obs in sc.obstacles:
        c_o, r_o = circumscribed_circle(obs)
        centers.append(c_o)
        radii.append(r_o)
    C = np.array(centers).reshape(-1, 2)
    R = np.array(radii)

    def clear(pose):
        p = np.asarray(pose, dtype=float)
        yaw = p[2]
        rot = np.array([[np.cos(yaw), -np.sin(yaw)], [np.sin(yaw), np.cos(yaw)]])
        center = p[:2] + rot @ c_r
        if C.shape[0] == 0:
            return math.inf
        return float((np.linalg.norm(C - center, axis=1) - R - r_r).min())

    return clear


def _repair_path(path: np.ndarray, sc: Scenario, clear_fn) -> np.ndarray:
    """Nudge path points until the robot clears every obstacle along it.

    The grid path ignores the robot's shape, so it can hug walls closer than
    the body fits. Each vertex (oriented along the path) is pushed down the
    clearance gradient until the margin alpha plus a small buffer holds, or a
    displacement cap is hit (leaving a genuinely infeasible path in place).
    """
    if not sc.obstacles:
        return path
    want = sc.barrier.alpha + 0.05
    h = 0.02
    pts = _densify(path, 0.25)
    seg = np.diff(pts, axis=0)
    yaws = np.arctan2(seg[:, 1], seg[:, 0])
    yaws = np.append(yaws, yaws[-1]) if len(yaws) else np.array([0.0])
    for i in range(1, len(pts)):  # the first point is the robot itself
        yaw = yaws[i]
        moved = 0.0
        for _ in range(40):
            c = clear_fn([pts[i, 0], pts[i, 1], yaw])
            if c >= want or moved > 0.6:
                break
            gx = clear_fn([pts[i, 0] + h, pts[i, 1], yaw]) - clear_fn([pts[i, 0] - h, pts[i, 1], yaw])
            gy = clear_fn([pts[i, 0], pts[i, 1] + h, yaw]) - clear_fn([pts[i, 0], pts[i, 1] - h, yaw])
            g = np.array([gx, gy]) / (2 * h)
            gn = np.linalg.norm(g)
            if gn < 1e-6:
                break
            step = min(want - c, 0.1)
            pts[i] += step * g / gn
            moved += step
    return pts


def _plan_reference(sc: Scenario, start_xy, grid):
    path = dijkstra(grid, _snap_free(grid, start_xy), sc.goal[:2])
    path = shortcut_path(grid, path)
    path = _repair_path(path, sc, _tracking_clearance(sc))
    return path_to_reference(path, sc.speed, sc.dt, sc.N, final_yaw=float(sc.goal[2]))


def _safe_stop(model, x) -> np.ndarray:
    """Braking input used when the solver reports an infeasible step."""
    u = np.zeros(model.input_dim)
    if isinstance(model, PlanarRigid):
        u = np.clip(-np.asarray(x, dtype=float)[3:] / model.dt, model.input_lower, model.input_upper)
    return u


def _reference_window(ref_poses: np.ndarray, idx: int, N: int, nx: int, dt: float) -> np.ndarray:
    window = ref_poses[idx : idx + N + 1]
    if window.shape[0] < N + 1:
        pad = np.repeat(window[-1][None, :], N + 1 - window.shape[0], axis=0)
        window = np.vstack([window, pad])
    if nx == 3:
        return window
    # velocity-level models track the pose reference with finite-difference velocities
    full = np.zeros((N + 1, nx))
    full[:, :3] = window
    full[:-1, 3:5] = np.diff(window[:, :2], axis=0) / dt
    full[:-1, 5] = wrap_angle(np.diff(window[:, 2])) / dt
    return full


def run_closed_loop(sc: Scenario) -> TrialResult:
    """One deterministic trial; the oracle adjudicates collision every step."""
    sc.validate()
    model = make_model(sc.model, sc.dt)
    weights = sc.weights if sc.weights is not None else default_weights(model)
    ctrl = NmpcController(model, weights, sc.robot_body, sc.mode, sc.barrier, sc.N)

    grid = rasterize(sc.obstacles, sc.bounds, sc.grid_resolution)
    try:
        ref = _plan_reference(sc, sc.start[:2], grid)
    except NoPath as exc:
        raise ScenarioInvalid(f"no grid path from start to goal: {exc}") from exc

    x = np.zeros(model.state_dim)
    x[:3] = sc.start
    states = [x.copy()]
    inputs: list[np.ndarray] = []
    min_dists = [sc.clearance(model.pose(x))]
    solve_ms: list[float] = []

    n_steps = int(round(sc.timeout / sc.dt))
    deadlock_steps = max(1, int(round(_DEADLOCK_WINDOW_S / sc.dt)))
    ref_idx = 0
    outcome = Outcome.TIMEOUT
    travel_time = sc.timeout

    for step in range(n_steps):
        pose = model.pose(x)
        pos = pose[:2]

        if np.linalg.norm(pos - sc.goal[:2]) <= sc.goal_tolerance:
            outcome = Outcome.REACHED_GOAL
            travel_time = step * sc.dt
            break
        if step >= deadlock_steps:
            back = states[step - deadlock_steps]
            if np.linalg.norm(pos - model.pose(back)[:2]) < _DEADLOCK_DISP_M:
                outcome = Outcome.DEADLOCK
                travel_time = step * sc.dt
                break

        # reference runs on its own clock so it keeps pulling the robot
        # around corners; it only pauses when the robot lags far behind
        if (
            ref_idx + 1 < ref.poses.shape[0]
            and np.linalg.norm(ref.poses[ref_idx, :2] - pos) <= _REF_MAX_AHEAD_M
        ):
            ref_idx += 1

        picked = select_obstacles(
            sc.obstacles, _to_pose2(pose), sc.selection_box_half, sc.max_selected, sc.robot_body
        )
        reference = _reference_window(ref.poses, ref_idx, sc.N, model.state_dim, sc.dt)
        sol = ctrl.solve(x, reference, [sc.obstacles[i] for i in picked])
        solve_ms.append(1e3 * sol.solve_time)
        u = sol.inputs[0] if sol.status is not SolveStatus.INFEASIBLE else _safe_stop(model, x)
        inputs.append(u.copy())

        x = model.step(x, u)
        states.append(x.copy())
        d = sc.clearance(model.pose(x))
        min_dists.append(d)
        if d < 0.0 and not sc.barrier.signed_distance:
            outcome = Outcome.COLLISION
            travel_time = (step + 1) * sc.dt
            break

    if outcome is not Outcome.COLLISION and any(d < 0.0 for d in min_dists):
        outcome = Outcome.COLLISION  # penetration anywhere along the executed path

    return TrialResult(
        states=np.array(states),
        inputs=np.array(inputs) if inputs else np.zeros((0, model.input_dim)),
        min_dists=np.array(min_dists),
        solve_ms=np.array(solve_ms),
        outcome=outcome,
        travel_time=travel_time,
    )


@dataclass(frozen=True)
class BenchmarkRow:
    mode: AvoidanceMode
    trial: int
    outcome: Outcome
    travel_time: float
    mean_solve_ms: float
    p95_solve_ms: float
    min_clearance: float
    start: np.ndarray
    goal: np.ndarray


@dataclass(frozen=True)
class ModeSummary:
    mode: AvoidanceMode
    n_trials: int
    completion: int
    fail_rate: float
    mean_time_success: float  # nan when nothing succeeded
    mean_solve_ms: float
    p95_solve_ms: float


@dataclass(frozen=True)
class BenchmarkReport:
    rows: list[BenchmarkRow]
    summaries: list[ModeSummary]


def _sample_pose(rng, box, sc: Scenario, grid) -> np.ndarray:
    xmin, ymin, xmax, ymax = box
    for _ in range(2000):
        pose = np.array([
            rng.uniform(xmin, xmax),
            rng.uniform(ymin, ymax),
            rng.uniform(-np.pi, np.pi),
        ])
        if sc.clearance(pose) < sc.barrier.alpha:
            continue
        try:
            dijkstra(grid, pose[:2], sc.goal[:2])
        except NoPath:
            continue
        return pose
    raise ScenarioInvalid("could not sample a clear pose after 2000 attempts")


def _sample_pairs(sc: Scenario, n_trials: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    grid = rasterize(sc.obstacles, sc.bounds, sc.grid_resolution)
    start_box = sc.start_box if sc.start_box is not None else sc.bounds
    goal_box = sc.goal_box if sc.goal_box is not None else sc.bounds
    pairs = []
    for _ in range(n_trials):
        # goal first so path feasibility can be checked against it for both poses
        goal = _sample_goal(rng, goal_box, sc, grid)
        probe = replace_goal(sc, goal)
        start = _sample_pose(rng, start_box, probe, grid)
        pairs.append((start, goal))
    return pairs


def _sample_goal(rng, box, sc: Scenario, grid) -> np.ndarray:
    xmin, ymin, xmax, ymax = box
    for _ in range(2000):
        pose = np.array([
            rng.uniform(xmin, xmax),
            rng.uniform(ymin, ymax),
            rng.uniform(-np.pi, np.pi),
        ])
        if sc.clearance(pose) >= sc.barrier.alpha:
            return pose
    raise ScenarioInvalid("could not sample a clear goal after 2000 attempts")


def replace_goal(sc: Scenario, goal) -> Scenario:
    out = replace(sc)
    out.goal = np.asarray(goal, dtype=float).reshape(3)
    return out


def _percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q)) if values.size else math.nan


def run_benchmark(
    sc_template: Scenario,
    n_trials: int,
    seed: int,
    modes: tuple[AvoidanceMode, ...] = (AvoidanceMode.EUCLIDEAN_EXP_DCBF, AvoidanceMode.EXP_DCBF_DUALITY),
    workers: int = 1,
) -> BenchmarkReport:
    """Seeded benchmark: the same start/goal pairs are replayed for every mode."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    pairs = _sample_pairs(sc_template, n_trials, seed)

    jobs = []
    for mode in modes:
        for trial, (start, goal) in enumerate(pairs):
            sc = replace(sc_template)
            sc.start, sc.goal, sc.mode = start.copy(), goal.copy(), mode
            jobs.append((mode, trial, sc))

    def _run(job):
        mode, trial, sc = job
        res = run_closed_loop(sc)
        return BenchmarkRow(
            mode=mode,
            trial=trial,
            outcome=res.outcome,
            travel_time=res.travel_time,
            mean_solve_ms=float(res.solve_ms.mean()) if res.solve_ms.size else math.nan,
            p95_solve_ms=_percentile(res.solve_ms, 95.0),
            min_clearance=res.min_clearance,
            start=sc.start.copy(),
            goal=sc.goal.copy(),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run, jobs))
    else:
        rows = [_run(j) for j in jobs]

    summaries = []
    for mode in modes:
        mine = [r for r in rows if r.mode is mode]
        wins = [r for r in mine if r.outcome is Outcome.REACHED_GOAL]
        ms = np.concatenate([np.atleast_1d(r.mean_solve_ms) for r in mine])
        summaries.append(ModeSummary(
            mode=mode,
            n_trials=len(mine),
            completion=len(wins),
            fail_rate=1.0 - len(wins) / len(mine),
            mean_time_success=float(np.mean([r.travel_time for r in wins])) if wins else math.nan,
            mean_solve_ms=float(np.nanmean(ms)),
            p95_solve_ms=_percentile(np.array([r.p95_solve_ms for r in mine]), 95.0),
        ))
    return BenchmarkReport(rows=rows, summaries=summaries)


@dataclass(frozen=True)
class TimingRow:
    obstacle_count: int
    mode: AvoidanceMode
    mean_ms: float
    p95_ms: float
    n_solves: int


def _ngon(center, radius: float, sides: int) -> Polytope:
    ang = np.linspace(0.0, 2 * np.pi, sides, endpoint=False)
    return hull_2d(np.column_stack([np.cos(ang), np.sin(ang)]) * radius + np.asarray(center))


def _timing_obstacles(k: int) -> list[Polytope]:
    # k 15-gons ringing a point the reference drives through, close enough
    # that every one stays inside the controller's attention at stand-off
    slots = [(1.3, 0.45), (1.3, -0.45), (1.9, 0.45), (1.9, -0.45)]
    return [_ngon(slots[i], 0.22, 15) for i in range(k)]


def timing_study(
    base: Scenario,
    obstacle_counts: list[int],
    modes: tuple[AvoidanceMode, ...] = (AvoidanceMode.DUALITY_CONSTRAINT, AvoidanceMode.EXP_DCBF_DUALITY),
    n_solves: int = 100,
) -> list[TimingRow]:
    """Mean NMPC solve time per obstacle count per mode over >= n_solves solves.

    Obstacles are 15-gons straddling a straight reference; every solve sees the
    full obstacle set so the count is exactly the number of active dual blocks.
    """
    model = make_model(base.model, base.dt)
    weights = base.weights if base.weights is not None else default_weights(model)
    rows = []
    for count in obstacle_counts:
        if count > 4:
            raise ValueError("timing study places at most 4 obstacles")
        obstacles = _timing_obstacles(count)
        for mode in modes:
            ctrl = NmpcController(model, weights, base.robot_body, mode, base.barrier, base.N)
            x = np.zeros(model.state_dim)
            times = []
            for step in range(n_solves):
                tt = (np.arange(base.N + 1) + step) * base.dt * base.speed
                ref3 = np.column_stack([np.minimum(tt, 4.0), np.zeros(base.N + 1), np.zeros(base.N + 1)])
                reference = _reference_window(ref3, 0, base.N, model.state_dim, base.dt)
                sol = ctrl.solve(x, reference, obstacles)
                times.append(1e3 * sol.solve_time)
                x = model.step(x, sol.inputs[0])
            t = np.array(times)
            rows.append(TimingRow(
                obstacle_count=count,
                mode=mode,
                mean_ms=float(t.mean()),
                p95_ms=_percentile(t, 95.0),
                n_solves=len(times),
            ))
    return rows
