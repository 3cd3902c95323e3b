"""NMPC via multiple-shooting SQP with pluggable obstacle-avoidance constraints.

Four avoidance formulations are supported: plain Euclidean separation,
Euclidean separation under an exponential decay bound, duality-based
polytope separation, and the duality form under the exponential decay bound
(optionally with the signed-distance equality handled by projection between
SQP iterations). In the duality modes the separation multipliers enter the
decision vector alongside states and inputs, and the per-step constraint
blocks are: the certified-separation inequality, the stationarity equality
tying robot and obstacle multipliers, the dual-norm cap, and multiplier
nonnegativity.

The SQP iterates linearize -> QP -> L1-merit line search. Avoidance
inequalities carry nonnegative slacks with a large linear penalty so the QP
subproblem never hard-fails; convergence still demands (numerically) zero
slack.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .distance import DegenerateDistance, DualPair, brute_force_distance, min_distance_dual_qp, scale_dual_for_mpc
from .geometry import Polytope, Pose2, box_polytope, rotation_matrix, transform_polytope, vertices_of
from .qpsolver import QpProblem, QpStatus, solve_qp

__all__ = [
    "AvoidanceMode",
    "BarrierConfig",
    "Weights",
    "OcpProblem",
    "Solution",
    "SolveStatus",
    "MissingDistance",
    "DimensionMismatch",
    "ZeroDual",
    "euclidean_h",
    "build_avoidance_constraints",
    "transcribe",
    "sqp_solve",
    "project_signed_norm",
    "warm_start",
    "select_obstacles",
    "NmpcController",
    "circumscribed_circle",
]

_LAMBDA_REG = 1e-6  # quadratic regularization on dual decision variables
_SLACK_REG = 1e-8


class MissingDistance(ValueError):
    """Current-state distance missing for a considered obstacle."""


class DimensionMismatch(ValueError):
    """Guess or reference dimensions inconsistent with the problem."""


class ZeroDual(ValueError):
    """Dual norm too small to project onto the unit-norm manifold."""


class AvoidanceMode(str, enum.Enum):
    EUCLIDEAN_DISTANCE = "EuclideanDistance"
    EUCLIDEAN_EXP_DCBF = "EuclideanExpDcbf"
    DUALITY_CONSTRAINT = "DualityConstraint"
    EXP_DCBF_DUALITY = "ExpDcbfDuality"

    @property
    def uses_duality(self) -> bool:
        return self in (AvoidanceMode.DUALITY_CONSTRAINT, AvoidanceMode.EXP_DCBF_DUALITY)


@dataclass(frozen=True)
class BarrierConfig:
    gamma: float = 0.98
    alpha: float = 0.03
    beta: float = 0.06
    signed_distance: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("margins must be nonnegative")


@dataclass(frozen=True)
class Weights:
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    u_ref: np.ndarray | None = None


@dataclass
class OcpProblem:
    N: int
    dt: float
    model: object
    weights: Weights
    reference: np.ndarray  # (N+1, state_dim)
    robot_body: Polytope
    obstacles: list[Polytope]
    mode: AvoidanceMode
    barrier: BarrierConfig
    robot_radius: float | None = None
    obstacle_radii: list[float] | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        ref = np.asarray(self.reference, dtype=float)
        if ref.shape != (self.N + 1, self.model.state_dim):
            raise DimensionMismatch(
                f"reference shape {ref.shape} != {(self.N + 1, self.model.state_dim)}"
            )
        self.reference = ref


class SolveStatus(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass
class Solution:
    states: np.ndarray  # (N+1, nx)
    inputs: np.ndarray  # (N, nu)
    duals: list[list[DualPair]] | None = None  # [k][obstacle]
    sqp_iterations: int = 0
    solve_time: float = 0.0
    status: SolveStatus = SolveStatus.MAX_ITER
    slack_usage: float = 0.0
    qp_dual: np.ndarray | None = None  # multiplier memory for warm starts


def circumscribed_circle(poly: Polytope) -> tuple[np.ndarray, float]:
    """Center (vertex centroid) and circumscribed radius of a polytope."""
    V = vertices_of(poly)
    c = V.mean(axis=0)
    return c, float(np.linalg.norm(V - c, axis=1).max())


def euclidean_h(x, obstacle_center, r_robot: float, r_obs: float) -> float:
    """Circle-approximation separation h = ||p - c|| - r_robot - r_obs."""
    p = np.asarray(x, dtype=float)[:2]
    c = np.asarray(obstacle_center, dtype=float)
    return float(np.linalg.norm(p - c) - r_robot - r_obs)


@dataclass
class AvoidanceBlocks:
    """Per-step avoidance constraint data produced ahead of transcription."""

    mode: AvoidanceMode
    rhs: np.ndarray  # (N+1, n_obs) right-hand sides of the separation rows
    include_norm: bool  # dual-norm cap rows present (duality modes)
    norm_equality: bool = False  # signed mode: unit dual norm as an equality
    centers: np.ndarray | None = None  # (n_obs, 2) for Euclidean modes
    radii_sum: np.ndarray | None = None  # r_robot + r_obs per obstacle


def build_avoidance_constraints(problem: OcpProblem, x0, d0=None) -> AvoidanceBlocks:
    """Right-hand sides and structure of the avoidance constraints per step.

    For the exponential-decay duality mode the bound at step k is
    prod_{n=0..k} gamma * max(d0_i - beta, 0) + alpha with d0_i the distance
    at the current state, in meters: the norm-capped dual separation value
    the constraint row certifies is the unsquared distance, so the decayed
    bound must be in the same units. The plain duality mode keeps separation
    plus the alpha margin without decay. Euclidean modes bound the circle
    separation h(x_k), decayed from h(x0) in the DCBF variant.
    """
    n_obs = len(problem.obstacles)
    N = problem.N
    bar = problem.barrier
    mode = problem.mode
    if mode is AvoidanceMode.EXP_DCBF_DUALITY:
        if d0 is None or len(d0) != n_obs:
            raise MissingDistance("distances at x0 required for every obstacle")
    if mode.uses_duality:
        rhs = np.zeros((N + 1, n_obs))
        if mode is AvoidanceMode.EXP_DCBF_DUALITY:
            for i in range(n_obs):
                d_tilde = max(float(d0[i]) - bar.beta, 0.0)
                k = np.arange(N + 1)
                rhs[:, i] = bar.gamma ** (k + 1) * d_tilde + bar.alpha
        else:
            rhs[:, :] = bar.alpha
        signed = mode is AvoidanceMode.EXP_DCBF_DUALITY and bar.signed_distance
        return AvoidanceBlocks(
            mode=mode, rhs=rhs, include_norm=not signed, norm_equality=signed
        )
    # Euclidean modes
    centers = np.zeros((n_obs, 2))
    radii_sum = np.zeros(n_obs)
    r_robot = problem.robot_radius
    if r_robot is None:
        _, r_robot = circumscribed_circle(problem.robot_body)
    for i, obs in enumerate(problem.obstacles):
        if problem.obstacle_radii is not None:
            c, _ = circumscribed_circle(obs)
            r = problem.obstacle_radii[i]
        else:
            c, r = circumscribed_circle(obs)
        centers[i] = c
        radii_sum[i] = r_robot + r
    rhs = np.zeros((N + 1, n_obs))
    if mode is AvoidanceMode.EUCLIDEAN_EXP_DCBF:
        p0 = problem.model.pose(np.asarray(x0, dtype=float))[:2]
        for i in range(n_obs):
            h0 = float(np.linalg.norm(p0 - centers[i]) - radii_sum[i])
            rhs[:, i] = bar.gamma ** np.arange(N + 1) * h0
    return AvoidanceBlocks(
        mode=mode, rhs=rhs, include_norm=False, centers=centers, radii_sum=radii_sum
    )


class Nlp:
    """Multiple-shooting transcription of an OcpProblem.

    Decision vector layout: all states x_0..x_N, all inputs u_0..u_{N-1},
    then (duality modes) the separation multipliers per step and obstacle.
    Equalities: initial-state pinning, shooting gaps, dual stationarity.
    Inequalities (g >= 0): input bounds, multiplier nonnegativity, dual-norm
    caps, and the separation rows (the only slack-relaxed rows).
    """

    def __init__(self, problem: OcpProblem, x0: np.ndarray, blocks: AvoidanceBlocks):
        self.problem = problem
        self.blocks = blocks
        model = problem.model
        self.nx = model.state_dim
        self.nu = model.input_dim
        self.N = problem.N
        self.x0 = np.asarray(x0, dtype=float)
        if self.x0.shape != (self.nx,):
            raise DimensionMismatch(f"x0 shape {self.x0.shape}")
        self.n_obs = len(problem.obstacles)
        self.duality = problem.mode.uses_duality
        self.sR = problem.robot_body.s
        self.sO = [o.s for o in problem.obstacles]
        self.dual_sizes = [self.sR + s for s in self.sO] if self.duality else []
        self.dps = sum(self.dual_sizes)  # duals per step
        self.n_x_block = (self.N + 1) * self.nx
        self.n_u_block = self.N * self.nu
        self.n_lam_block = (self.N + 1) * self.dps if self.duality else 0
        self.nw = self.n_x_block + self.n_u_block + self.n_lam_block
        # dual offsets within one step
        off = np.cumsum([0] + self.dual_sizes)
        self._dual_off = off
        self._step = getattr(model, "step_smooth", model.step)
        # constraint row counts
        self.n_eq = self.nx * (self.N + 1)
        if self.duality:
            self.n_eq += 2 * self.n_obs * (self.N + 1)
        self._eq_norm_base = self.n_eq
        if blocks.norm_equality:
            self.n_eq += self.n_obs * (self.N + 1)
        self.n_bounds = 2 * self.n_u_block
        self.n_lam_rows = self.n_lam_block
        self.n_norm = self.n_obs * (self.N + 1) if (self.duality and blocks.include_norm) else 0
        self.n_avoid = self.n_obs * (self.N + 1)
        self.n_in = self.n_bounds + self.n_lam_rows + self.n_norm + self.n_avoid
        self._build_cost()

    # -- indexing helpers -------------------------------------------------
    def ix(self, k):
        return slice(k * self.nx, (k + 1) * self.nx)

    def iu(self, k):
        base = self.n_x_block
        return slice(base + k * self.nu, base + (k + 1) * self.nu)

    def ilam(self, k, i):
        base = self.n_x_block + self.n_u_block + k * self.dps
        return slice(base + self._dual_off[i], base + self._dual_off[i + 1])

    def pack(self, sol: Solution) -> np.ndarray:
        if sol.states.shape != (self.N + 1, self.nx) or sol.inputs.shape != (self.N, self.nu):
            raise DimensionMismatch("guess state/input dimensions do not match the problem")
        w = np.zeros(self.nw)
        w[: self.n_x_block] = sol.states.ravel()
        w[self.n_x_block : self.n_x_block + self.n_u_block] = sol.inputs.ravel()
        if self.duality:
            if sol.duals is None or len(sol.duals) != self.N + 1:
                raise DimensionMismatch("duality modes need per-step dual guesses")
            for k in range(self.N + 1):
                if len(sol.duals[k]) != self.n_obs:
                    raise DimensionMismatch("dual guess obstacle count mismatch")
                for i, pair in enumerate(sol.duals[k]):
                    if pair.lambda_robot.shape[0] != self.sR or pair.lambda_obstacle.shape[0] != self.sO[i]:
                        raise DimensionMismatch("dual guess facet counts mismatch")
                    w[self.ilam(k, i)] = np.concatenate([pair.lambda_robot, pair.lambda_obstacle])
        return w

    def unpack(self, w: np.ndarray) -> Solution:
        states = w[: self.n_x_block].reshape(self.N + 1, self.nx)
        inputs = w[self.n_x_block : self.n_x_block + self.n_u_block].reshape(self.N, self.nu)
        duals = None
        if self.duality:
            duals = []
            for k in range(self.N + 1):
                row = []
                for i in range(self.n_obs):
                    lam = w[self.ilam(k, i)]
                    row.append(DualPair(lam[: self.sR].copy(), lam[self.sR :].copy()))
                duals.append(row)
        return Solution(states=states.copy(), inputs=inputs.copy(), duals=duals)

    # -- cost --------------------------------------------------------------
    def _build_cost(self):
        p = self.problem
        H = np.zeros(self.nw)  # diagonal is enough unless Q/R are dense
        dense = not (
            np.count_nonzero(p.weights.Q - np.diag(np.diag(p.weights.Q))) == 0
            and np.count_nonzero(p.weights.R - np.diag(np.diag(p.weights.R))) == 0
            and np.count_nonzero(p.weights.Qf - np.diag(np.diag(p.weights.Qf))) == 0
        )
        Hfull = np.zeros((self.nw, self.nw)) if dense else None
        f = np.zeros(self.nw)
        u_ref = p.weights.u_ref if p.weights.u_ref is not None else np.zeros(self.nu)
        for k in range(self.N + 1):
            Qk = p.weights.Qf if k == self.N else p.weights.Q
            sl = self.ix(k)
            if dense:
                Hfull[sl, sl] = 2.0 * Qk
            else:
                H[sl] = 2.0 * np.diag(Qk)
            f[sl] = -2.0 * (Qk @ p.reference[k])
        for k in range(self.N):
            sl = self.iu(k)
            if dense:
                Hfull[sl, sl] = 2.0 * p.weights.R
            else:
                H[sl] = 2.0 * np.diag(p.weights.R)
            f[sl] = -2.0 * (p.weights.R @ u_ref)
        lam0 = self.n_x_block + self.n_u_block
        if dense:
            idx = np.arange(lam0, self.nw)
            Hfull[idx, idx] = 2.0 * _LAMBDA_REG
            self.H = Hfull
        else:
            H[lam0:] = 2.0 * _LAMBDA_REG
            self.H = np.diag(H)
        self.f = f
        # constant offset so cost(w) is the true tracking cost
        self._cost_const = 0.0
        for k in range(self.N + 1):
            Qk = p.weights.Qf if k == self.N else p.weights.Q
            self._cost_const += p.reference[k] @ Qk @ p.reference[k]
        self._cost_const += self.N * (u_ref @ p.weights.R @ u_ref)

    def cost(self, w: np.ndarray) -> float:
        return float(0.5 * w @ (self.H @ w) + self.f @ w + self._cost_const)

    def cost_grad(self, w: np.ndarray) -> np.ndarray:
        return self.H @ w + self.f

    # -- constraints --------------------------------------------------------
    def eval_constraints(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Equality residuals and inequality values (g >= 0 convention)."""
        p = self.problem
        N, nx = self.N, self.nx
        r_eq = np.zeros(self.n_eq)
        r_eq[:nx] = w[self.ix(0)] - self.x0
        for k in range(N):
            xk = w[self.ix(k)]
            uk = w[self.iu(k)]
            r_eq[(k + 1) * nx : (k + 2) * nx] = w[self.ix(k + 1)] - self._step(xk, uk)
        g = np.zeros(self.n_in)
        # input bounds
        lo, up = p.model.input_lower, p.model.input_upper
        U = w[self.n_x_block : self.n_x_block + self.n_u_block].reshape(N, self.nu)
        g[: self.N * self.nu] = (up[None, :] - U).ravel()
        g[self.N * self.nu : 2 * self.N * self.nu] = (U - lo[None, :]).ravel()
        row_lam = self.n_bounds
        row_norm = row_lam + self.n_lam_rows
        row_av = row_norm + self.n_norm
        if self.duality:
            eq_base = nx * (N + 1)
            Ab = p.robot_body.A
            bb = p.robot_body.b
            hidx = p.model.heading_idx
            pidx = list(p.model.pos_idx)
            for k in range(N + 1):
                xk = w[self.ix(k)]
                th = xk[hidx]
                pos = xk[pidx]
                Rt = rotation_matrix(th)
                for i, obs in enumerate(p.obstacles):
                    lam = w[self.ilam(k, i)]
                    lR, lO = lam[: self.sR], lam[self.sR :]
                    Mv = Ab.T @ lR
                    r_eq[eq_base : eq_base + 2] = Rt @ Mv + obs.A.T @ lO
                    eq_base += 2
                    sl = self.ilam(k, i)
                    g[row_lam + (sl.start - (self.n_x_block + self.n_u_block)) :][: lam.shape[0]] = lam
                    b_world = bb + (Ab @ Rt.T) @ pos
                    lhs = -lR @ b_world - lO @ obs.b
                    g[row_av + k * self.n_obs + i] = lhs - self.blocks.rhs[k, i]
                    if self.blocks.include_norm:
                        v = obs.A.T @ lO
                        g[row_norm + k * self.n_obs + i] = 1.0 - v @ v
                    elif self.blocks.norm_equality:
                        v = obs.A.T @ lO
                        r_eq[self._eq_norm_base + k * self.n_obs + i] = v @ v - 1.0
        else:
            for k in range(N + 1):
                pos = w[self.ix(k)][list(p.model.pos_idx)]
                for i in range(self.n_obs):
                    h = np.linalg.norm(pos - self.blocks.centers[i]) - self.blocks.radii_sum[i]
                    g[row_av + k * self.n_obs + i] = h - self.blocks.rhs[k, i]
        return r_eq, g

    def jacobians(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.problem
        N, nx, nu = self.N, self.nx, self.nu
        Jeq = np.zeros((self.n_eq, self.nw))
        Jin = np.zeros((self.n_in, self.nw))
        Jeq[:nx, self.ix(0)] = np.eye(nx)
        for k in range(N):
            xk, uk = w[self.ix(k)], w[self.iu(k)]
            A, B = p.model.jacobians(xk, uk)
            rows = slice((k + 1) * nx, (k + 2) * nx)
            Jeq[rows, self.ix(k + 1)] = np.eye(nx)
            Jeq[rows, self.ix(k)] = -A
            Jeq[rows, self.iu(k)] = -B
        # input bounds
        for k in range(N):
            for j in range(nu):
                Jin[k * nu + j, self.iu(k).start + j] = -1.0
                Jin[N * nu + k * nu + j, self.iu(k).start + j] = 1.0
        row_lam = self.n_bounds
        row_norm = row_lam + self.n_lam_rows
        row_av = row_norm + self.n_norm
        if self.duality:
            eq_base = nx * (N + 1)
            Ab, bb = p.robot_body.A, p.robot_body.b
            hidx = p.model.heading_idx
            pidx = list(p.model.pos_idx)
            xcols = lambda k: self.ix(k).start
            for k in range(N + 1):
                xk = w[self.ix(k)]
                th = xk[hidx]
                pos = xk[pidx]
                c, s = np.cos(th), np.sin(th)
                Rt = np.array([[c, -s], [s, c]])
                Rp = np.array([[-s, -c], [c, -s]])
                for i, obs in enumerate(p.obstacles):
                    sl = self.ilam(k, i)
                    lam = w[sl]
                    lR, lO = lam[: self.sR], lam[self.sR :]
                    Mv = Ab.T @ lR
                    # stationarity rows
                    rows = slice(eq_base, eq_base + 2)
                    Jeq[rows, xcols(k) + hidx] = Rp @ Mv
                    Jeq[rows, sl.start : sl.start + self.sR] = Rt @ Ab.T
                    Jeq[rows, sl.start + self.sR : sl.stop] = obs.A.T
                    eq_base += 2
                    # lambda >= 0 rows (identity)
                    lam_row = row_lam + (sl.start - (self.n_x_block + self.n_u_block))
                    for j in range(lam.shape[0]):
                        Jin[lam_row + j, sl.start + j] = 1.0
                    # separation row
                    av = row_av + k * self.n_obs + i
                    b_world = bb + (Ab @ Rt.T) @ pos
                    Jin[av, [xcols(k) + pidx[0], xcols(k) + pidx[1]]] = -(Rt @ Mv)
                    Jin[av, xcols(k) + hidx] = -(Rp @ Mv) @ pos
                    Jin[av, sl.start : sl.start + self.sR] = -b_world
                    Jin[av, sl.start + self.sR : sl.stop] = -obs.b
                    if self.blocks.include_norm:
                        nr = row_norm + k * self.n_obs + i
                        v = obs.A.T @ lO
                        Jin[nr, sl.start + self.sR : sl.stop] = -2.0 * (obs.A @ v)
                    elif self.blocks.norm_equality:
                        nr = self._eq_norm_base + k * self.n_obs + i
                        v = obs.A.T @ lO
                        Jeq[nr, sl.start + self.sR : sl.stop] = 2.0 * (obs.A @ v)
        else:
            for k in range(N + 1):
                pos = w[self.ix(k)][list(p.model.pos_idx)]
                for i in range(self.n_obs):
                    dvec = pos - self.blocks.centers[i]
                    nrm = max(np.linalg.norm(dvec), 1e-9)
                    av = row_av + k * self.n_obs + i
                    cols = [self.ix(k).start + j for j in p.model.pos_idx]
                    Jin[av, cols] = dvec / nrm
        return Jeq, Jin

    @property
    def avoid_rows(self) -> slice:
        start = self.n_bounds + self.n_lam_rows + self.n_norm
        return slice(start, start + self.n_avoid)


def transcribe(problem: OcpProblem, x0, guess: Solution, d0=None) -> Nlp:
    """Build the multiple-shooting NLP; validates the guess dimensions."""
    blocks = build_avoidance_constraints(problem, x0, d0)
    nlp = Nlp(problem, np.asarray(x0, dtype=float), blocks)
    nlp.pack(guess)  # dimension check
    nlp.initial_guess = guess
    return nlp


def project_signed_norm(dual: DualPair, obstacle: Polytope) -> DualPair:
    """Rescale a dual pair so the obstacle-side dual norm is exactly one."""
    nrm = float(np.linalg.norm(obstacle.A.T @ dual.lambda_obstacle))
    if nrm <= 1e-9:
        raise ZeroDual("dual norm below threshold")
    return DualPair(dual.lambda_robot / nrm, dual.lambda_obstacle / nrm)


def _project_iterate(nlp: Nlp, w: np.ndarray, fallback: list[DualPair | None]) -> np.ndarray:
    """Apply the signed-distance norm projection to every dual block."""
    p = nlp.problem
    for k in range(nlp.N + 1):
        for i, obs in enumerate(p.obstacles):
            sl = nlp.ilam(k, i)
            lam = w[sl]
            pair = DualPair(lam[: nlp.sR], lam[nlp.sR :])
            try:
                pair = project_signed_norm(pair, obs)
            except ZeroDual:
                if fallback[i] is not None:
                    pair = fallback[i]
                else:
                    continue
            w[sl] = np.concatenate([pair.lambda_robot, pair.lambda_obstacle])
    return w


def sqp_solve(
    nlp: Nlp,
    max_sqp_iter: int = 30,
    kkt_tol: float = 1e-5,
    slack_weight: float = 1e4,
    qp_max_iter: int = 800,
    qp_dual0: np.ndarray | None = None,
) -> Solution:
    """Solve the transcribed NLP by SQP with an L1 merit line search."""
    t_start = time.perf_counter()
    p = nlp.problem
    signed = (
        p.mode is AvoidanceMode.EXP_DCBF_DUALITY
        and p.barrier.signed_distance
        and nlp.duality
    )
    w = nlp.pack(nlp.initial_guess)
    fallback: list[DualPair | None] = [None] * nlp.n_obs
    if signed:
        for k in range(nlp.N + 1):
            for i in range(nlp.n_obs):
                if fallback[i] is None:
                    sl = nlp.ilam(k, i)
                    lam = w[sl]
                    if np.linalg.norm(lam) > 1e-9:
                        fallback[i] = DualPair(lam[: nlp.sR].copy(), lam[nlp.sR :].copy())
        w = _project_iterate(nlp, w, fallback)

    n_s = nlp.n_avoid
    nw = nlp.nw
    av = nlp.avoid_rows
    sigma = slack_weight
    qp_dual = qp_dual0
    if qp_dual is not None and qp_dual.shape[0] != nlp.n_eq + nlp.n_in + n_s:
        qp_dual = None

    def merit(wv):
        r_eq, g = nlp.eval_constraints(wv)
        viol = np.minimum(g, 0.0)
        return nlp.cost(wv) + sigma * (np.abs(r_eq).sum() - viol.sum()), r_eq, g

    step_inf = np.inf
    iters = 0
    no_progress = False
    for it in range(max_sqp_iter):
        iters = it + 1
        r_eq, g = nlp.eval_constraints(w)
        Jeq, Jin = nlp.jacobians(w)
        grad = nlp.cost_grad(w)
        # QP over [dw; s]
        nz = nw + n_s
        Hq = np.zeros((nz, nz))
        Hq[:nw, :nw] = nlp.H
        idx = np.arange(nw, nz)
        Hq[idx, idx] = 2.0 * _SLACK_REG
        fq = np.concatenate([grad, np.full(n_s, slack_weight)])
        Aeq = np.zeros((nlp.n_eq, nz))
        Aeq[:, :nw] = Jeq
        beq = -r_eq
        n_in = nlp.n_in
        Ain = np.zeros((n_in + n_s, nz))
        Ain[:n_in, :nw] = -Jin
        Ain[av, nw:] = -np.eye(n_s)
        Ain[n_in:, nw:] = -np.eye(n_s)
        bin_ = np.concatenate([g, np.zeros(n_s)])
        qp = solve_qp(
            QpProblem(Hq, fq, A_eq=Aeq, b_eq=beq, A_in=Ain, b_in=bin_),
            eps_eq=1e-6,
            eps_in=1e-6,
            max_iter=qp_max_iter,
            warm_start_dual=qp_dual,
            polish=False,
        )
        if qp.status is QpStatus.INFEASIBLE:
            break  # should not happen given the slack relaxation
        qp_dual = qp.dual
        dw = qp.z[:nw]
        step_inf = np.abs(dw).max() if dw.size else 0.0
        if step_inf <= kkt_tol * (1.0 + np.abs(w).max()):
            break
        # L1 merit line search with a second-order correction at full step:
        # re-evaluating the constraints at w + dw and removing the residual
        # along the same Jacobian lets full steps pass the merit test where
        # plain backtracking would cut them (Maratos effect)
        phi0, _, _ = merit(w)
        viol0 = np.abs(r_eq).sum() - np.minimum(g, 0.0).sum()
        pred = grad @ dw - sigma * viol0
        t = 1.0
        accepted = False
        best = (np.inf, w)
        soc_tried = False
        phi_acc = phi0
        while True:
            w_t = w + t * dw
            if signed:
                w_t = _project_iterate(nlp, w_t.copy(), fallback)
            phi_t, re_t, g_t = merit(w_t)
            if phi_t < best[0]:
                best = (phi_t, w_t)
            if phi_t <= phi0 + 1e-4 * t * min(pred, 0.0):
                w = w_t
                accepted = True
                phi_acc = phi_t
                break
            if t == 1.0 and not soc_tried:
                soc_tried = True
                act = g_t < 0.0
                Jact = np.vstack([Jeq, Jin[act]])
                res = np.concatenate([re_t, g_t[act]])
                if res.size:
                    dc, *_ = np.linalg.lstsq(Jact, -res, rcond=None)
                    w_c = w + dw + dc
                    if signed:
                        w_c = _project_iterate(nlp, w_c.copy(), fallback)
                    phi_c, _, _ = merit(w_c)
                    if phi_c < best[0]:
                        best = (phi_c, w_c)
                    if phi_c <= phi0 + 1e-4 * min(pred, 0.0):
                        w = w_c
                        accepted = True
                        phi_acc = phi_c
                        break
                continue
            t *= 0.5
            if t < 1.0 / 128.0:
                break
        if not accepted:
            if best[0] < phi0:
                w = best[1]
            if phi0 - best[0] <= 1e-5 * (1.0 + abs(phi0)):
                no_progress = True  # stationary for the merit function
                break
        elif nlp.duality and viol0 <= 1e-6 and phi0 - phi_acc <= 1e-4 * (1.0 + abs(phi0)):
            # Feasible iterate and the merit decrease has shrunk to noise
            # level: the Gauss-Newton model has no curvature for the bilinear
            # duality rows, so from here the iteration only crawls linearly
            # toward the optimum; the remaining improvement is irrelevant for
            # a receding-horizon controller
            no_progress = True
            break
    r_eq, g = nlp.eval_constraints(w)
    slack_usage = float(np.maximum(-g[av], 0.0).sum())
    eq_res = float(np.abs(r_eq).max()) if r_eq.size else 0.0
    other = np.concatenate([g[: av.start], g[av.stop :]])
    other_viol = float(np.maximum(-other, 0.0).max()) if other.size else 0.0
    # the iterate counts as stationary when the step shrank below tolerance,
    # or when the exact-penalty merit admits no further descent at a point
    # satisfying the constraint tolerances (an inexact QP step can stay just
    # above the step tolerance at an optimum)
    stationary = step_inf <= kkt_tol * (1.0 + np.abs(w).max()) or no_progress
    converged = stationary and eq_res <= 1e-5 and other_viol <= 1e-6
    if converged and slack_usage <= 1e-6:
        status = SolveStatus.CONVERGED
    elif converged:
        status = SolveStatus.INFEASIBLE
    else:
        status = SolveStatus.MAX_ITER
    sol = nlp.unpack(w)
    sol.sqp_iterations = iters
    sol.status = status
    sol.slack_usage = slack_usage
    sol.qp_dual = qp_dual
    sol.solve_time = time.perf_counter() - t_start
    return sol


def warm_start(
    prev: Solution | None,
    x0,
    obstacles: list[Polytope],
    problem: OcpProblem,
    distances: list[tuple[float, DualPair]] | None = None,
) -> Solution:
    """Shifted primal guess plus horizon-constant dual guesses.

    States and inputs shift one step from the previous solution (last entry
    repeated); on the first call states follow the reference with the current
    state pinned. Dual guesses shift along with the primal when the previous
    solve used the same obstacle set; otherwise they come from the current
    distance-QP solution, scaled by 1/(2 d0) and held constant over the
    horizon (at near contact the unscaled multipliers are used as-is).
    """
    x0 = np.asarray(x0, dtype=float)
    N = problem.N
    if prev is not None and _stalled(prev, problem):
        # A stationary previous trajectory makes the linearization singular
        # for nonholonomic models (no first-order lateral motion at v = 0),
        # trapping SQP at stand-off points. Reseeding from the reference
        # restores a useful linearization; slack relaxation absorbs any
        # initial avoidance violation along it.
        prev = None
    if prev is None or prev.states.shape != (N + 1, problem.model.state_dim):
        states = problem.reference.copy()
        states[0] = x0
        inputs = np.zeros((N, problem.model.input_dim))
    else:
        states = np.vstack([prev.states[1:], prev.states[-1]])
        states[0] = x0
        inputs = np.vstack([prev.inputs[1:], prev.inputs[-1]])
    duals = None
    if problem.mode.uses_duality:
        if _duals_match(prev, obstacles, problem.robot_body, N):
            duals = [list(row) for row in prev.duals[1:]] + [list(prev.duals[-1])]
        else:
            robot_world = transform_polytope(
                problem.robot_body, _pose_of(problem.model, x0)
            )
            row = []
            for i, obs in enumerate(obstacles):
                if distances is not None:
                    d0, pair = distances[i]
                else:
                    res, pair = min_distance_dual_qp(robot_world, obs)
                    d0 = res.d
                try:
                    row.append(scale_dual_for_mpc(pair, d0))
                except DegenerateDistance:
                    row.append(pair)
            duals = [list(row) for _ in range(N + 1)]
    return Solution(states=states, inputs=inputs, duals=duals)


def _stalled(prev: Solution, problem: OcpProblem) -> bool:
    """Previous plan barely moves while the reference asks for real travel."""
    pos = prev.states[:, :2]
    span = float(np.linalg.norm(pos - pos[0], axis=1).max())
    asked = float(np.linalg.norm(problem.reference[-1, :2] - pos[0]))
    return span < 0.02 and asked > 0.1


def _duals_match(prev: Solution | None, obstacles, robot_body: Polytope, N: int) -> bool:
    if prev is None or prev.duals is None or len(prev.duals) != N + 1:
        return False
    row = prev.duals[0]
    if len(row) != len(obstacles):
        return False
    return all(
        pair.lambda_robot.shape[0] == robot_body.s
        and pair.lambda_obstacle.shape[0] == obs.s
        for pair, obs in zip(row, obstacles)
    )


def _pose_of(model, x) -> Pose2:
    px, py, th = model.pose(np.asarray(x, dtype=float))
    return Pose2.from_xytheta(px, py, th)


def select_obstacles(
    all_obstacles: list[Polytope],
    pose: Pose2,
    box_half: float,
    max_count: int,
    robot_body: Polytope,
) -> list[int]:
    """Indices of the nearest obstacles inside the local selection box.

    Filters to obstacles intersecting the axis-aligned box of half-width
    box_half around the pose, sorts by oracle distance to the robot polytope
    (ties broken by index), and caps the count.
    """
    if box_half <= 0:
        raise ValueError("box_half must be positive")
    box = box_polytope(2 * box_half, 2 * box_half, center=(pose.position.x, pose.position.y))
    robot_world = transform_polytope(robot_body, pose)
    candidates = []
    for idx, obs in enumerate(all_obstacles):
        if brute_force_distance(box, obs) > 1e-12:
            continue
        d = brute_force_distance(robot_world, obs)
        candidates.append((d, idx))
    candidates.sort()
    return [idx for _, idx in candidates[:max_count]]


class NmpcController:
    """Receding-horizon controller wrapping transcription, warm starts and SQP.

    Holds mutable warm-start memory; use one instance per closed-loop rollout.
    """

    def __init__(
        self,
        model,
        weights: Weights,
        robot_body: Polytope,
        mode: AvoidanceMode,
        barrier: BarrierConfig,
        N: int,
        robot_radius: float | None = None,
        slack_weight: float = 1e4,
        max_sqp_iter: int = 25,
        kkt_tol: float = 1e-5,
    ):
        self.model = model
        self.weights = weights
        self.robot_body = robot_body
        self.mode = mode
        self.barrier = barrier
        self.N = N
        if robot_radius is None:
            _, robot_radius = circumscribed_circle(robot_body)
        self.robot_radius = robot_radius
        self.slack_weight = slack_weight
        self.max_sqp_iter = max_sqp_iter
        self.kkt_tol = kkt_tol
        self._prev: Solution | None = None

    def reset(self):
        self._prev = None

    def solve(self, x0, reference: np.ndarray, obstacles: list[Polytope]) -> Solution:
        t0 = time.perf_counter()
        x0 = np.asarray(x0, dtype=float)
        problem = OcpProblem(
            N=self.N,
            dt=self.model.dt,
            model=self.model,
            weights=self.weights,
            reference=reference,
            robot_body=self.robot_body,
            obstacles=obstacles,
            mode=self.mode,
            barrier=self.barrier,
            robot_radius=self.robot_radius,
        )
        d0 = None
        distances = None
        if self.mode.uses_duality:
            robot_world = transform_polytope(self.robot_body, _pose_of(self.model, x0))
            distances = []
            for obs in obstacles:
                res, pair = min_distance_dual_qp(robot_world, obs)
                distances.append((res.d, pair))
            # the distance QP attains the squared gap; the avoidance rhs
            # lives in meters like the norm-capped separation rows
            d0 = [float(np.sqrt(max(d, 0.0))) for d, _ in distances]
        guess = warm_start(self._prev, x0, obstacles, problem, distances)
        nlp = transcribe(problem, x0, guess, d0)
        sol = sqp_solve(
            nlp,
            max_sqp_iter=self.max_sqp_iter,
            kkt_tol=self.kkt_tol,
            slack_weight=self.slack_weight,
            qp_dual0=self._prev.qp_dual if self._prev is not None else None,
        )
        sol.solve_time = time.perf_counter() - t0
        self._prev = sol
        return sol
