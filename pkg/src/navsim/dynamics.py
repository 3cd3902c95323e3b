"""Discrete-time planar dynamics models with analytic linearization.

Two models: a forward-Euler unicycle (default benchmark model; its heading
state makes the rotating robot polytope pose-dependent) and a semi-implicit
planar rigid body. Both expose step/jacobians plus a pose extraction used by
the avoidance constraints.
"""

from __future__ import annotations

import numpy as np

from .geometry import wrap_angle

__all__ = ["Unicycle", "PlanarRigid", "step_unicycle", "step_planar_rigid", "linearize"]


def step_unicycle(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Forward-Euler unicycle step; state (px, py, theta), input (v, omega)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    px, py, th = x
    v, w = u
    out = np.array([px + v * np.cos(th) * dt, py + v * np.sin(th) * dt, th + w * dt])
    out[2] = wrap_angle(out[2])
    return out


def step_planar_rigid(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Semi-implicit Euler for a planar rigid body.

    State (px, py, theta, vx, vy, omega), input (ax, ay, alpha); velocities
    update first and the pose integrates the updated velocities.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    vel = x[3:] + np.asarray(u, dtype=float) * dt
    pose = x[:3] + vel * dt
    out = np.concatenate([pose, vel])
    out[2] = wrap_angle(out[2])
    return out


class Unicycle:
    state_dim = 3
    input_dim = 2

    def __init__(self, dt: float = 0.015, v_max: float = 1.0, omega_max: float = 4.0):
        self.dt = float(dt)
        self.input_lower = np.array([-v_max, -omega_max])
        self.input_upper = np.array([v_max, omega_max])

    def step(self, x, u):
        return step_unicycle(x, u, self.dt)

    def step_smooth(self, x, u):
        """Step without heading wrapping (used inside the shooting NLP)."""
        px, py, th = x
        v, w = u
        return np.array([px + v * np.cos(th) * self.dt, py + v * np.sin(th) * self.dt, th + w * self.dt])

    def jacobians(self, x, u):
        th = x[2]
        v = u[0]
        dt = self.dt
        c, s = np.cos(th), np.sin(th)
        A = np.array([[1.0, 0.0, -v * s * dt], [0.0, 1.0, v * c * dt], [0.0, 0.0, 1.0]])
        B = np.array([[c * dt, 0.0], [s * dt, 0.0], [0.0, dt]])
        return A, B

    @staticmethod
    def pose(x):
        return np.asarray(x, dtype=float)[:3]

    pos_idx = (0, 1)
    heading_idx = 2


class PlanarRigid:
    state_dim = 6
    input_dim = 3

    def __init__(self, dt: float = 0.015, a_max: float = 2.0, alpha_max: float = 6.0):
        self.dt = float(dt)
        self.input_lower = np.array([-a_max, -a_max, -alpha_max])
        self.input_upper = np.array([a_max, a_max, alpha_max])

    def step(self, x, u):
        return step_planar_rigid(x, u, self.dt)

    def step_smooth(self, x, u):
        vel = x[3:] + np.asarray(u, dtype=float) * self.dt
        return np.concatenate([x[:3] + vel * self.dt, vel])

    def jacobians(self, x, u):
        dt = self.dt
        I3 = np.eye(3)
        A = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3]])
        B = np.vstack([dt * dt * I3, dt * I3])
        return A, B

    @staticmethod
    def pose(x):
        return np.asarray(x, dtype=float)[:3]

    pos_idx = (0, 1)
    heading_idx = 2


def linearize(model, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of model.step at (x, u); analytic when the model provides them,
    central finite differences (step 1e-6) otherwise."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if hasattr(model, "jacobians"):
        return model.jacobians(x, u)
    h = 1e-6
    n, m = x.shape[0], u.shape[0]
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        A[:, i] = (model.step(x + e, u) - model.step(x - e, u)) / (2 * h)
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        B[:, j] = (model.step(x, u + e) - model.step(x, u - e)) / (2 * h)
    return A, B
