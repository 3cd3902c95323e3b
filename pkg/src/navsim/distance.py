"""Minimum distance between convex polytopes via primal and dual QPs.

The primal program minimizes the squared gap between member points of the
two polytopes. Its dual is a QP over nonnegative facet multipliers whose
optimum equals the squared distance; those multipliers are the separation
certificates consumed by the avoidance constraints in the NMPC. A
vertex/edge enumeration oracle provides an independent cross-check, and a
norm-constrained feasibility predicate covers the conic form of the dual
(whose objective attains the unsquared distance; see verify_dual_socp).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Polytope, vertices_of
from .qpsolver import QpProblem, QpStatus, SolverFailure, solve_qp

__all__ = [
    "DistanceResult",
    "DualPair",
    "DegenerateDistance",
    "min_distance_primal",
    "min_distance_dual_qp",
    "verify_dual_socp",
    "brute_force_distance",
    "signed_distance",
    "scale_dual_for_mpc",
]

_DEGENERATE_TOL = 1e-8


class DegenerateDistance(ValueError):
    """Distance too close to zero for the requested operation."""


@dataclass(frozen=True)
class DistanceResult:
    d: float  # squared minimum distance
    witness_robot: np.ndarray
    witness_obstacle: np.ndarray
    degenerate: bool = False  # polytopes intersect (d ~ 0)


@dataclass(frozen=True)
class DualPair:
    lambda_robot: np.ndarray
    lambda_obstacle: np.ndarray

    def stationarity_residual(self, robot: Polytope, obstacle: Polytope) -> float:
        r = robot.A.T @ self.lambda_robot + obstacle.A.T @ self.lambda_obstacle
        return float(np.abs(r).max())


def min_distance_primal(robot: Polytope, obstacle: Polytope) -> DistanceResult:
    """Squared minimum distance by the primal QP over witness points."""
    I2 = np.eye(2)
    H = 2.0 * np.block([[I2, -I2], [-I2, I2]])
    f = np.zeros(4)
    A_in = np.block(
        [
            [robot.A, np.zeros((robot.s, 2))],
            [np.zeros((obstacle.s, 2)), obstacle.A],
        ]
    )
    b_in = np.concatenate([robot.b, obstacle.b])
    guess = np.concatenate([vertices_of(robot).mean(axis=0), vertices_of(obstacle).mean(axis=0)])
    sol = solve_qp(QpProblem(H, f, A_in=A_in, b_in=b_in), warm_start=guess)
    if sol.status is not QpStatus.OPTIMAL:
        raise SolverFailure(f"primal distance QP failed: {sol.status}")
    d = max(float(sol.objective), 0.0)
    return DistanceResult(
        d=d,
        witness_robot=sol.z[:2],
        witness_obstacle=sol.z[2:],
        degenerate=d <= _DEGENERATE_TOL,
    )


def min_distance_dual_qp(
    robot: Polytope,
    obstacle: Polytope,
    warm: DualPair | None = None,
) -> tuple[DistanceResult, DualPair]:
    """Squared minimum distance and certifying multipliers from the dual QP.

    Maximizes -1/4 lO' AO AO' lO - lR' bR - lO' bO subject to the stationarity
    equality AR' lR + AO' lO = 0 and lR, lO >= 0. Intersecting inputs are
    flagged degenerate (zero multipliers are then admissible), not failed.
    """
    sR, sO = robot.s, obstacle.s
    n = sR + sO
    H = np.zeros((n, n))
    H[sR:, sR:] = 0.5 * (obstacle.A @ obstacle.A.T)
    f = np.concatenate([robot.b, obstacle.b])
    A_eq = np.hstack([robot.A.T, obstacle.A.T])  # 2 x n
    b_eq = np.zeros(2)
    A_in = -np.eye(n)
    b_in = np.zeros(n)
    ws = None if warm is None else np.concatenate([warm.lambda_robot, warm.lambda_obstacle])
    sol = solve_qp(QpProblem(H, f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in), warm_start=ws)
    if sol.status is not QpStatus.OPTIMAL:
        raise SolverFailure(f"dual distance QP failed: {sol.status}")
    lam = np.maximum(sol.z, 0.0)
    pair = DualPair(lambda_robot=lam[:sR], lambda_obstacle=lam[sR:])
    d = max(-float(sol.objective), 0.0)
    degenerate = d <= _DEGENERATE_TOL
    if degenerate:
        # witness recovery from multipliers is ill-conditioned at contact
        res = min_distance_primal(robot, obstacle)
        return DistanceResult(d, res.witness_robot, res.witness_obstacle, True), pair
    # Witnesses from the equality multipliers nu: yR = -nu, yO = yR - g where
    # g = AO' lO / 2 is the gap vector (stationarity of the dual Lagrangian).
    nu = sol.dual_eq
    g = 0.5 * (obstacle.A.T @ pair.lambda_obstacle)
    yR = -nu
    yO = yR - g
    return DistanceResult(d, yR, yO, False), pair


def verify_dual_socp(
    robot: Polytope,
    obstacle: Polytope,
    dual: DualPair,
    lower_bound: float,
    tol: float = 1e-6,
) -> bool:
    """Check feasibility of the norm-constrained (conic) dual certificate.

    True iff the multipliers are nonnegative, satisfy stationarity, have
    ||AO' lO|| <= 1, and the linear objective -lR'bR - lO'bO reaches at least
    lower_bound - tol. With the unit-norm constraint active, that objective
    attains the unsquared polytope distance (the squared value is the dual
    QP's; the two solutions differ by a scaling).
    """
    lR, lO = dual.lambda_robot, dual.lambda_obstacle
    if lR.min(initial=0.0) < -1e-9 or lO.min(initial=0.0) < -1e-9:
        return False
    if dual.stationarity_residual(robot, obstacle) > tol:
        return False
    if np.linalg.norm(obstacle.A.T @ lO) > 1.0 + 1e-9:
        return False
    objective = -float(lR @ robot.b) - float(lO @ obstacle.b)
    return objective >= lower_bound - tol


def _sat_separated(VR: np.ndarray, VO: np.ndarray) -> bool:
    """Separating-axis test on edge normals; exact for convex polygons."""
    for V in (VR, VO):
        edges = np.roll(V, -1, axis=0) - V
        axes = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        pr = VR @ axes.T
        po = VO @ axes.T
        gap_lo = po.min(axis=0) - pr.max(axis=0)
        gap_hi = pr.min(axis=0) - po.max(axis=0)
        if np.any(gap_lo > 0) or np.any(gap_hi > 0):
            return True
    return False


def _point_segment_sq(P: np.ndarray, S1: np.ndarray, S2: np.ndarray) -> float:
    """Min squared distance from each point in P to each segment (S1[j], S2[j])."""
    d = S2 - S1  # (m,2)
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd < 1e-18, 1.0, dd)
    w = P[:, None, :] - S1[None, :, :]  # (n,m,2)
    t = np.clip(np.einsum("nmj,mj->nm", w, d) / dd[None, :], 0.0, 1.0)
    proj = S1[None, :, :] + t[:, :, None] * d[None, :, :]
    diff = P[:, None, :] - proj
    return float(np.einsum("nmj,nmj->nm", diff, diff).min())


def brute_force_distance(robot: Polytope, obstacle: Polytope) -> float:
    """Exact squared distance by vertex/edge enumeration; 0 when intersecting.

    For disjoint convex polygons the closest pair is always vertex-vertex or
    vertex-edge, so point-to-segment enumeration in both directions is exact.
    """
    VR = vertices_of(robot)
    VO = vertices_of(obstacle)
    if not _sat_separated(VR, VO):
        return 0.0
    d1 = _point_segment_sq(VR, VO, np.roll(VO, -1, axis=0))
    d2 = _point_segment_sq(VO, VR, np.roll(VR, -1, axis=0))
    return min(d1, d2)


def signed_distance(robot: Polytope, obstacle: Polytope) -> float:
    """Signed (unsquared) distance: positive gap or negative penetration depth.

    Penetration is the minimum translation along any facet normal (exact for
    convex polygons).
    """
    VR = vertices_of(robot)
    VO = vertices_of(obstacle)
    if _sat_separated(VR, VO):
        return float(np.sqrt(brute_force_distance(robot, obstacle)))
    pen = np.inf
    for V in (VR, VO):
        edges = np.roll(V, -1, axis=0) - V
        axes = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        axes /= np.linalg.norm(axes, axis=1)[:, None]
        pr = VR @ axes.T
        po = VO @ axes.T
        overlap = np.minimum(pr.max(axis=0), po.max(axis=0)) - np.maximum(pr.min(axis=0), po.min(axis=0))
        pen = min(pen, float(overlap.min()))
    return -max(pen, 0.0)


def scale_dual_for_mpc(dual: DualPair, d0: float) -> DualPair:
    """Scale dual-QP multipliers by 1/(2 d0) for use as the MPC initial guess."""
    if d0 <= 1e-9:
        raise DegenerateDistance(f"cannot scale duals at distance {d0}")
    return DualPair(dual.lambda_robot / (2.0 * d0), dual.lambda_obstacle / (2.0 * d0))
