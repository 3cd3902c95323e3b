"""Convex QP solver: operator splitting (ADMM) with active-set polishing.

Solves    min  0.5 z'Hz + f'z
          s.t. A_eq z = b_eq,  A_in z <= b_in

The splitting iteration follows the OSQP scheme (Ruiz equilibration,
relaxation, adaptive step size, primal infeasibility certificates). A final
polish step re-solves the KKT system on the detected active set, which is
what delivers 1e-8-level residuals. Warm starting accepts a primal point and
optionally the stacked dual vector from a previous solve.

Problems are solved densely below a size threshold and through a sparse LU
of the quasi-definite KKT matrix above it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["QpProblem", "QpSolution", "QpStatus", "SolverFailure", "solve_qp"]

_INF = np.inf


class SolverFailure(RuntimeError):
    """Numerical breakdown inside the QP solver."""


class QpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        f = np.asarray(self.f, dtype=float).ravel()
        n = f.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H shape {H.shape} inconsistent with f length {n}")
        if not sp.issparse(self.H) and np.max(np.abs(H - H.T)) > 1e-10:
            raise ValueError("H must be symmetric")
        for name in ("A_eq", "A_in"):
            M = getattr(self, name)
            if M is not None and np.asarray(M).shape[1] != n:
                raise ValueError(f"{name} has wrong column count")

    @property
    def n(self) -> int:
        return np.asarray(self.f).ravel().shape[0]

    @property
    def n_eq(self) -> int:
        return 0 if self.A_eq is None else np.asarray(self.b_eq).ravel().shape[0]

    @property
    def n_in(self) -> int:
        return 0 if self.A_in is None else np.asarray(self.b_in).ravel().shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    eq_residual: float
    in_violation: float
    iterations: int
    dual_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dual_in: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dual(self) -> np.ndarray:
        """Stacked (eq, in) multipliers, usable to warm start a related solve."""
        return np.concatenate([self.dual_eq, self.dual_in])


def _stack(p: QpProblem):
    """Stack constraints into C z in [l, u] form (eq rows have l == u)."""
    parts, ls, us = [], [], []
    if p.n_eq:
        Aeq = np.atleast_2d(np.asarray(p.A_eq, dtype=float))
        beq = np.asarray(p.b_eq, dtype=float).ravel()
        parts.append(Aeq)
        ls.append(beq)
        us.append(beq)
    if p.n_in:
        Ain = np.atleast_2d(np.asarray(p.A_in, dtype=float))
        bin_ = np.asarray(p.b_in, dtype=float).ravel()
        parts.append(Ain)
        ls.append(np.full(bin_.shape, -_INF))
        us.append(bin_)
    if parts:
        C = np.vstack(parts)
        l = np.concatenate(ls)
        u = np.concatenate(us)
    else:
        C = np.zeros((0, p.n))
        l = np.zeros(0)
        u = np.zeros(0)
    return C, l, u


def _ruiz(H, f, C, l, u, iters: int = 4):
    """Modified Ruiz equilibration; returns scaled data and scaling vectors."""
    n, m = H.shape[0], C.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Hs, fs, Cs = H.copy(), f.copy(), C.copy()
    for _ in range(iters):
        col_norm_H = np.abs(Hs).max(axis=0) if n else np.zeros(0)
        col_norm_C = np.abs(Cs).max(axis=0) if m else np.zeros(n)
        dx = np.sqrt(np.maximum(np.maximum(col_norm_H, col_norm_C), 1e-8))
        dx = 1.0 / dx
        if m:
            de = 1.0 / np.sqrt(np.maximum(np.abs(Cs).max(axis=1), 1e-8))
        else:
            de = np.zeros(0)
        Hs = (Hs * dx[None, :]) * dx[:, None]
        fs = fs * dx
        if m:
            Cs = (Cs * dx[None, :]) * de[:, None]
        D *= dx
        E *= de if m else 1.0
        # cost scaling
        h_norms = np.abs(Hs).max(axis=0) if n else np.zeros(0)
        gamma = 1.0 / max(np.mean(h_norms) if n else 1.0, np.abs(fs).max() if fs.size else 1.0, 1e-8)
        Hs *= gamma
        fs *= gamma
        c *= gamma
    ls = np.where(np.isfinite(l), E * l, l)
    us = np.where(np.isfinite(u), E * u, u)
    return Hs, fs, Cs, ls, us, D, E, c


class _DenseKKT:
    def __init__(self, H, C, sigma, rho):
        M = H + sigma * np.eye(H.shape[0])
        if C.shape[0]:
            M = M + (C.T * rho[None, :]) @ C
        self.chol = sla.cho_factor(M, check_finite=False)
        self.C = C
        self.rho = rho

    def step(self, x, z, y, sigma, f):
        rhs = sigma * x - f
        if self.C.shape[0]:
            rhs = rhs + self.C.T @ (self.rho * z - y)
        xt = sla.cho_solve(self.chol, rhs, check_finite=False)
        zt = self.C @ xt if self.C.shape[0] else np.zeros(0)
        return xt, zt


class _SparseKKT:
    def __init__(self, H, C, sigma, rho):
        n, m = H.shape[0], C.shape[0]
        Hs = sp.csc_matrix(H)
        Cs = sp.csc_matrix(C)
        K = sp.bmat(
            [
                [Hs + sigma * sp.eye(n), Cs.T],
                [Cs, -sp.diags(1.0 / rho)],
            ],
            format="csc",
        )
        self.lu = spla.splu(K)
        self.C = Cs
        self.rho = rho
        self.n = n
        self.m = m

    def step(self, x, z, y, sigma, f):
        rhs = np.concatenate([sigma * x - f, z - y / self.rho])
        sol = self.lu.solve(rhs)
        xt = sol[: self.n]
        nu = sol[self.n :]
        zt = z + (nu - y) / self.rho
        return xt, zt


def _kkt_solve(H, Ca, rhs):
    """Solve the regularized equality KKT system with iterative refinement."""
    na, n = Ca.shape[0], H.shape[0]
    delta = 1e-9
    K = np.zeros((n + na, n + na))
    K[:n, :n] = H + delta * np.eye(n)
    K[:n, n:] = Ca.T
    K[n:, :n] = Ca
    K[n:, n:] = -delta * np.eye(na)
    K0 = K.copy()
    K0[:n, :n] -= delta * np.eye(n)
    K0[n:, n:] += delta * np.eye(na)
    if n + na > 1500:
        lu = spla.splu(sp.csc_matrix(K))
        sol = lu.solve(rhs)
        for _ in range(2):
            sol = sol + lu.solve(rhs - K0 @ sol)
    else:
        lu = sla.lu_factor(K, check_finite=False)
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(2):
            sol = sol + sla.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
    return sol


def _recover_multipliers(H, f, C, act, is_eq, x):
    """Sign-feasible multipliers on a (possibly degenerate) active set.

    Solves min ||C_act^T y + (Hx + f)|| with y >= 0 on inequality rows and
    free on equality rows: the equality multipliers are eliminated by least
    squares, leaving an NNLS over the active inequalities. Returns the
    full-length multiplier vector, or None when the stationarity residual
    stays large (x not optimal for this set).
    """
    from scipy.optimize import nnls

    g = H @ x + f
    eq_act = act & is_eq
    in_act = act & ~is_eq
    Ae = C[eq_act].T  # n x ne
    Ai = C[in_act].T  # n x ni
    # orthonormal basis of range(Ae) to project it out
    if Ae.shape[1]:
        Qe, _ = np.linalg.qr(Ae, mode="reduced")
        proj = lambda v: v - Qe @ (Qe.T @ v)
    else:
        proj = lambda v: v
    try:
        yi, _ = nnls(proj(Ai) if Ai.shape[1] else Ai, -proj(g))
    except (RuntimeError, ValueError):
        return None
    resid = g + (Ai @ yi if yi.size else 0.0)
    ye, *_ = np.linalg.lstsq(Ae, -resid, rcond=None) if Ae.shape[1] else (np.zeros(0),)
    total = g + (Ai @ yi if yi.size else 0.0) + (Ae @ ye if ye.size else 0.0)
    scale = max(np.abs(g).max(), 1.0)
    if np.abs(total).max() > 1e-9 * scale:
        return None
    y_full = np.zeros(C.shape[0])
    y_full[in_act] = yi
    y_full[eq_act] = ye
    return y_full


def _polish(H, f, C, l, u, x, y, eps_eq, eps_in, is_eq, act0=None, rounds=8):
    """Active-set refinement around the splitting solution.

    Solves the equality KKT on a working set, adding violated rows and
    dropping rows with negative inequality multipliers, for a few rounds.
    Returns (x, y) or None; the caller verifies residuals before adopting.
    """
    m, n = C.shape[0], H.shape[0]
    if m == 0:
        return None
    if act0 is not None:
        act = act0.copy()
    else:
        slack = u - C @ x
        act = is_eq | (y > 1e-12) | (slack < 1e-7)
    best = None
    for round_ in range(rounds):
        Ca, ua = C[act], u[act]
        rhs = np.concatenate([-f, ua])
        try:
            sol = _kkt_solve(H, Ca, rhs)
        except (sla.LinAlgError, RuntimeError):
            return best
        xp = sol[:n]
        yp_act = sol[n:]
        neg = (~is_eq[act]) & (yp_act < -1e-10)
        viol = (u - C @ xp) < -1e-12
        viol &= ~act
        yp = np.zeros(m)
        yp[act] = np.where(is_eq[act], yp_act, np.maximum(yp_act, 0.0))
        best = (xp, yp)
        if not neg.any() and not viol.any():
            return best
        if not viol.any() and round_ in (2, 7):
            # Primal point feasible but multiplier signs keep flipping: the
            # active set is degenerate (dependent rows), so multipliers are
            # non-unique. Recover a sign-correct set by bounded least squares.
            rec = _recover_multipliers(H, f, C, act, is_eq, xp)
            if rec is not None:
                return xp, rec
        # refine the working set and retry: add all violated rows, but drop
        # only the most negative multiplier (single-drop avoids cycling on
        # degenerate active sets)
        act_idx = np.flatnonzero(act)
        if viol.any():
            act[viol] = True
        elif neg.any():
            worst = act_idx[np.flatnonzero(neg)[np.argmin(yp_act[neg])]]
            act[worst] = False
        act |= is_eq
    return best


def _residuals(H, f, C, l, u, x, y):
    if C.shape[0]:
        Cx = C @ x
        r_d = np.abs(H @ x + f + C.T @ y).max() if x.size else 0.0
        eq = ~np.isinf(l)
        r_eq = np.abs(Cx[eq] - u[eq]).max() if eq.any() else 0.0
        r_in = np.maximum(Cx[~eq] - u[~eq], 0.0).max() if (~eq).any() else 0.0
    else:
        r_d = np.abs(H @ x + f).max() if x.size else 0.0
        r_eq = r_in = 0.0
    return r_d, r_eq, r_in


def solve_qp(
    p: QpProblem,
    eps_eq: float = 1e-8,
    eps_in: float = 1e-8,
    max_iter: int = 20000,
    warm_start: np.ndarray | None = None,
    warm_start_dual: np.ndarray | None = None,
    polish: bool = True,
) -> QpSolution:
    """Solve a convex QP; see module docstring for the problem form.

    Deterministic for identical inputs and options. Warm starts only change
    the iteration path, not the optimum.
    """
    n = p.n
    f0 = np.asarray(p.f, dtype=float).ravel()
    H0 = np.asarray(p.H, dtype=float)
    C0, l0, u0 = _stack(p)
    m = C0.shape[0]
    n_eq = p.n_eq
    is_eq = np.zeros(m, dtype=bool)
    is_eq[:n_eq] = True

    if m == 0:
        z, *_ = np.linalg.lstsq(H0, -f0, rcond=None)
        obj = 0.5 * z @ H0 @ z + f0 @ z
        r_d = np.abs(H0 @ z + f0).max() if n else 0.0
        status = QpStatus.OPTIMAL if r_d <= max(eps_eq, 1e-7) else QpStatus.MAX_ITER
        return QpSolution(z, float(obj), status, 0.0, 0.0, 1)

    H, f, C, l, u, D, E, c = _ruiz(H0, f0, C0, l0, u0)

    sigma = 1e-6
    alpha = 1.6
    rho_bar = 0.1
    rho = np.where(is_eq, rho_bar * 1e3, rho_bar)
    use_sparse = n * (n + m) > 250_000
    kkt_cls = _SparseKKT if use_sparse else _DenseKKT
    try:
        kkt = kkt_cls(H, C, sigma, rho)
    except (sla.LinAlgError, RuntimeError) as exc:
        raise SolverFailure("KKT factorization failed") from exc

    x = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float) / D
    # The dual warm start seeds the upfront polish attempt below, not the
    # splitting iteration: a stale multiplier sign pattern slows ADMM down,
    # while its active set frequently polishes to the exact solution.
    y = np.zeros(m)
    z = np.clip(C @ x, l, u)

    # Polish attempts start at a loose splitting tolerance; polish verifies its
    # own result, so a premature attempt only costs one factorization.
    eps_admm = 3e-5
    check_every = 25
    best = None
    it = 0
    eps_pinf = 1e-9
    polish_gap = 300
    next_polish = polish_gap

    # A dual warm start carries last solve's active set; when it is sparse
    # enough to look like a polished solution, one upfront polish attempt can
    # solve the QP with a handful of factorizations.
    if warm_start_dual is not None:
        yw = np.asarray(warm_start_dual, dtype=float)
        act0 = is_eq | (yw > 1e-12)
        if act0.sum() <= 0.9 * n:
            pol = _polish(H0, f0, C0, l0, u0, D * x, yw, eps_eq, eps_in, is_eq, act0=act0, rounds=3)
            if pol is not None:
                xp, yp = pol
                rd_p, req_p, rin_p = _residuals(H0, f0, C0, l0, u0, xp, yp)
                scale0 = max(
                    np.abs(H0 @ xp).max() if n else 0.0,
                    np.abs(f0).max() if f0.size else 0.0,
                    np.abs(C0.T @ yp).max() if m else 0.0,
                    1.0,
                )
                if req_p <= eps_eq and rin_p <= eps_in and rd_p <= 1e-9 * scale0:
                    obj = 0.5 * xp @ H0 @ xp + f0 @ xp
                    return QpSolution(
                        xp, float(obj), QpStatus.OPTIMAL, float(req_p), float(rin_p), 0,
                        dual_eq=yp[:n_eq], dual_in=yp[n_eq:],
                    )
        y = c * yw / np.where(E > 0, E, 1.0)

    while it < max_iter:
        y_prev_chunk = y.copy()
        for _ in range(check_every):
            it += 1
            xt, zt = kkt.step(x, z, y, sigma, f)
            x = alpha * xt + (1 - alpha) * x
            zh = alpha * zt + (1 - alpha) * z
            z_new = np.clip(zh + y / rho, l, u)
            y = y + rho * (zh - z_new)
            z = z_new
        # unscaled iterates
        xu = D * x
        yu = E * y / c
        r_d, r_eq, r_in = _residuals(H0, f0, C0, l0, u0, xu, yu)
        scale_d = max(
            np.abs(H0 @ xu).max() if n else 0.0,
            np.abs(f0).max() if f0.size else 0.0,
            np.abs(C0.T @ yu).max() if m else 0.0,
            1.0,
        )
        primal_ok = r_eq <= max(eps_admm, eps_eq) and r_in <= max(eps_admm, eps_in)
        dual_ok = r_d <= eps_admm * scale_d
        # Polish self-validates, so it is also attempted periodically before the
        # splitting tolerance is met: the working-set refinement inside often
        # recovers the exact solution from a rough active-set estimate. Each
        # failed periodic attempt doubles the wait before the next one.
        near = r_eq <= 1e-3 and r_in <= 1e-3 and r_d <= 1e-2 * scale_d
        if polish and ((primal_ok and dual_ok) or (it >= next_polish and near)):
            pol = _polish(H0, f0, C0, l0, u0, xu, yu, eps_eq, eps_in, is_eq)
            if pol is not None:
                xp, yp = pol
                rd_p, req_p, rin_p = _residuals(H0, f0, C0, l0, u0, xp, yp)
                if req_p <= eps_eq and rin_p <= eps_in and rd_p <= 1e-9 * scale_d:
                    obj = 0.5 * xp @ H0 @ xp + f0 @ xp
                    return QpSolution(
                        xp, float(obj), QpStatus.OPTIMAL, float(req_p), float(rin_p), it,
                        dual_eq=yp[:n_eq], dual_in=yp[n_eq:],
                    )
                if primal_ok and dual_ok and req_p <= max(r_eq, eps_eq) and rin_p <= max(r_in, eps_in) and rd_p <= max(r_d, 1e-9 * scale_d):
                    xu, yu, r_d, r_eq, r_in = xp, yp, rd_p, req_p, rin_p
            if it >= next_polish:
                polish_gap = min(polish_gap * 2, 1600)
                next_polish = it + polish_gap
        if primal_ok and dual_ok:
            if r_eq <= eps_eq and r_in <= eps_in:
                obj = 0.5 * xu @ H0 @ xu + f0 @ xu
                return QpSolution(
                    xu, float(obj), QpStatus.OPTIMAL, float(r_eq), float(r_in), it,
                    dual_eq=yu[:n_eq], dual_in=yu[n_eq:],
                )
            # polish could not reach the tight tolerances; keep iterating harder
            eps_admm = max(eps_admm / 10, 1e-12)
        best = (xu, yu, r_eq, r_in)
        # primal infeasibility certificate
        dy = y - y_prev_chunk
        dyu = E * dy / c
        dy_norm = np.abs(dyu).max()
        if dy_norm > 1e-14:
            bad_ray = np.any((dyu < -eps_pinf * dy_norm) & np.isinf(l))
            if not bad_ray:
                ctdy = np.abs(C0.T @ dyu).max()
                support = u0[np.isfinite(u0)] @ np.maximum(dyu[np.isfinite(u0)], 0) + (
                    l0[np.isfinite(l0)] @ np.minimum(dyu[np.isfinite(l0)], 0)
                )
                if ctdy <= eps_pinf * dy_norm * max(np.abs(C0).max(), 1.0) and support < -eps_pinf * dy_norm:
                    return QpSolution(
                        D * x, float("nan"), QpStatus.INFEASIBLE, float("inf"), float("inf"), it,
                    )
        # adaptive rho: global scale from the primal/dual residual ratio,
        # per-row boost on (estimated) active inequality rows — active-set
        # identification is what splitting methods converge slowest on
        if it % 200 == 0 and m:
            num = r_eq + r_in
            den = r_d / scale_d
            if den > 1e-14:
                # floor the numerator so a primal-feasible but dual-stuck
                # iterate still drives rho down instead of freezing it
                ratio = np.sqrt(max(num, 1e-4 * den) / den)
                new_rho_bar = float(np.clip(rho_bar * ratio, 1e-6, 1e6))
                if new_rho_bar / rho_bar > 5 or rho_bar / new_rho_bar > 5:
                    rho_bar = new_rho_bar
            active = ((u - C @ x) < 1e-4) | (np.abs(y) > 1e-6)
            new_rho = np.where(
                is_eq, rho_bar * 1e3, np.where(active, rho_bar * 1e2, rho_bar * 1e-1)
            )
            if np.abs(np.log10(new_rho / rho)).max() > 0.9:
                rho = new_rho
                kkt = kkt_cls(H, C, sigma, rho)

    xu, yu, r_eq, r_in = best if best is not None else (D * x, E * y / c, np.inf, np.inf)
    r_d = _residuals(H0, f0, C0, l0, u0, xu, yu)[0]
    if polish:
        # two active-set guesses: the multipliers (reliable when splitting
        # nearly converged) and the primal slacks (reliable when the dual
        # iterate is the part that stalled)
        slack_act = is_eq | ((u0 - C0 @ xu) < 1e-7)
        for act0 in (None, slack_act):
            pol = _polish(H0, f0, C0, l0, u0, xu, yu, eps_eq, eps_in, is_eq, act0=act0, rounds=16)
            if pol is None:
                continue
            xp, yp = pol
            rd_p, req_p, rin_p = _residuals(H0, f0, C0, l0, u0, xp, yp)
            if req_p <= max(r_eq, eps_eq) and rin_p <= max(r_in, eps_in) and rd_p <= r_d:
                xu, yu, r_eq, r_in, r_d = xp, yp, req_p, rin_p, rd_p
                break
    obj = 0.5 * xu @ H0 @ xu + f0 @ xu
    scale_d = max(
        np.abs(H0 @ xu).max() if n else 0.0,
        np.abs(f0).max() if f0.size else 0.0,
        np.abs(C0.T @ yu).max() if m else 0.0,
        1.0,
    )
    ok = r_eq <= eps_eq and r_in <= eps_in and r_d <= 1e-6 * scale_d
    status = QpStatus.OPTIMAL if ok else QpStatus.MAX_ITER
    return QpSolution(
        xu, float(obj), status, float(r_eq), float(r_in), it,
        dual_eq=yu[:n_eq], dual_in=yu[n_eq:],
    )
