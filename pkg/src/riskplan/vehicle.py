"""Lateral single-track vehicle model, LQR design and reference generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.linalg import solve_continuous_lyapunov

from .mdp_core import GridGeometry

STEER_LIMIT = 0.5


@dataclass(frozen=True)
class VehicleParams:
    m_T: float = 1300.0
    I_T: float = 1.0e4
    K: float = 91090.0
    a: float = 1.6154
    b: float = 1.3462
    v_T: float = 16.75
    mu: float = 0.8  # recorded only; the linear model has no friction limit

    def __post_init__(self):
        for name in ("m_T", "I_T", "K", "a", "b", "v_T", "mu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EgoState:
    X: float = 0.0
    Y: float = 0.0
    Psi: float = 0.0
    alpha_T: float = 0.0
    Psi_dot: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Psi, self.alpha_T, self.Psi_dot])

    @classmethod
    def from_array(cls, x) -> EgoState:
        return cls(*(float(v) for v in x))

    @property
    def lateral(self) -> np.ndarray:
        return np.array([self.Y, self.Psi, self.alpha_T, self.Psi_dot])


def lateral_matrices(p: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` of the 4-state lateral model over ``[Y, Psi, alpha_T, Psi_dot]``."""
    m, I, K, v = p.m_T, p.I_T, p.K, p.v_T
    d = p.a - p.b
    A = np.array([
        [0.0, v, v, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -2 * K / (m * v), -(m * v - d * K / v) / (m * v)],
        [0.0, 0.0, d * K / I, -(p.a ** 2 + p.b ** 2) * K / (I * v)],
    ])
    B = np.array([[0.0], [0.0], [K / (m * v)], [p.a * K / I]])
    return A, B


def dynamics(state: np.ndarray, delta: float, p: VehicleParams) -> np.ndarray:
    """Time derivative of ``[X, Y, Psi, alpha_T, Psi_dot]``."""
    A, B = lateral_matrices(p)
    out = np.empty(5)
    out[0] = p.v_T
    out[1:] = A @ state[1:] + B[:, 0] * delta
    return out


# ------------------------------------------------------------------ LQR

class LqrError(RuntimeError):
    pass


@dataclass(frozen=True)
class LqrGain:
    K: np.ndarray  # (1, 4)
    P: np.ndarray  # (4, 4)
    residual: float
    iterations: int

    @property
    def row(self) -> np.ndarray:
        return self.K[0]


def care_residual(A, B, Q, R, P) -> float:
    Rinv = np.linalg.inv(np.atleast_2d(R))
    res = A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q
    return float(np.linalg.norm(res, "fro"))


def _stabilizing_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Bass: with beta beyond the spectral abscissa, B^T Z^-1 from
    # (A + beta I) Z + Z (A + beta I)^T = 2 B B^T stabilises A - B K.
    beta = max(1.0, 1.0 + np.max(np.abs(np.linalg.eigvals(A))))
    As = A + beta * np.eye(A.shape[0])
    Z = solve_continuous_lyapunov(As, 2 * B @ B.T)
    return B.T @ np.linalg.inv(Z)


def solve_lqr(A, B, Qw, Rw, tol: float = 1e-12, max_iters: int = 100) -> LqrGain:
    """Kleinman iteration on the continuous Riccati equation."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    if B.shape[0] != A.shape[0]:
        B = B.T
    Q, R = np.atleast_2d(Qw).astype(float), np.atleast_2d(Rw).astype(float)
    Rinv = np.linalg.inv(R)
    if np.max(np.linalg.eigvals(A).real) < 0:
        K = np.zeros((B.shape[1], A.shape[0]))
    else:
        try:
            K = _stabilizing_gain(A, B)
        except np.linalg.LinAlgError as exc:
            raise LqrError("unstabilizable: no stabilising initial gain") from exc
    if np.max(np.linalg.eigvals(A - B @ K).real) >= 0:
        raise LqrError("unstabilizable: no stabilising initial gain")
    P_prev = None
    for it in range(1, max_iters + 1):
        Acl = A - B @ K
        P = solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K = Rinv @ B.T @ P
        if P_prev is not None and np.linalg.norm(P - P_prev) <= tol * max(1.0, np.linalg.norm(P)):
            break
        P_prev = P
    else:
        raise LqrError("no convergence of the Riccati iteration")
    residual = care_residual(A, B, Q, R, P)
    return LqrGain(K, P, residual, it)


def design_lateral_lqr(p: VehicleParams, Qw=(3.0, 1.0, 1.0, 1.0), Rw: float = 1.0) -> LqrGain:
    A, B = lateral_matrices(p)
    return solve_lqr(A, B, np.diag(Qw), Rw)


# ------------------------------------------------------------ reference

@dataclass(frozen=True)
class ReferenceTrajectory:
    """Planned path ``t -> (X_p, Y_p)``; held constant outside its time span."""

    times: np.ndarray
    ordinates: np.ndarray
    X0: float
    t0: float
    v_T: float
    spline: Callable = field(repr=False)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def Y(self, t):
        tt = np.clip(t, self.times[0], self.times[-1])
        out = self.spline(tt)
        return float(out) if np.ndim(out) == 0 else out

    def X(self, t):
        return self.X0 + self.v_T * (np.asarray(t) - self.t0)

    def sample(self, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = int(round((self.times[-1] - self.times[0]) / dt))
        t = self.times[0] + dt * np.arange(n + 1)
        return t, self.X(t), self.Y(t)


def hermite_reference(times: Sequence[float], ordinates: Sequence[float], X0: float,
                      v_T: float) -> ReferenceTrajectory:
    """Monotone C1 cubic through the ordinates with zero end slopes."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(ordinates, dtype=float)
    if t.size == 1:
        t = np.array([t[0], t[0] + 1.0])
        y = np.array([y[0], y[0]])
    if np.any(np.diff(t) <= 0):
        raise ValueError("waypoint times must be strictly increasing")
    slopes = PchipInterpolator(t, y).derivative()(t) if t.size > 2 else np.zeros(2)
    slopes[0] = slopes[-1] = 0.0
    return ReferenceTrajectory(t, y, float(X0), float(t[0]), float(v_T), CubicHermiteSpline(t, y, slopes))


def waypoints_to_reference(cells: Sequence[tuple[int, int]], times: Sequence[float], g: GridGeometry,
                           v_T: float, X0: float, y0: float | None = None) -> ReferenceTrajectory:
    """Reference through the centre ordinates of planned cells.

    ``y0`` replaces the first waypoint ordinate, typically with the vehicle's
    actual lateral position when the plan is issued.
    """
    if len(cells) == 0:
        raise ValueError("plan must contain at least one waypoint")
    if len(cells) != len(times):
        raise ValueError("need one timestamp per waypoint")
    rows = np.array([c[0] for c in cells])
    if np.any(np.abs(np.diff(rows)) > 1):
        raise ValueError("plan jumps more than one row in a step")
    ys = np.array([g.row_center(r) for r in rows])
    if y0 is not None:
        ys[0] = y0
    return hermite_reference(times, ys, X0, v_T)


def constant_reference(t0: float, duration: float, y: float, X0: float, v_T: float) -> ReferenceTrajectory:
    return hermite_reference([t0, t0 + duration], [y, y], X0, v_T)


# ------------------------------------------------------- closed loop

def track(state: np.ndarray, ref: ReferenceTrajectory, t: float, gain: LqrGain) -> float:
    """``delta = -K [Y - Y_p(t), Psi, alpha_T, Psi_dot]``."""
    e = np.array([state[1] - ref.Y(t), state[2], state[3], state[4]])
    return float(-gain.row @ e)


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class ClosedLoop:
    """Vehicle plus LQR tracker with actuator saturation bookkeeping."""

    def __init__(self, params: VehicleParams, gain: LqrGain, steer_limit: float | None = STEER_LIMIT):
        self.params = params
        self.gain = gain
        self.steer_limit = steer_limit
        self.A, B = lateral_matrices(params)
        self.b = B[:, 0]
        self.saturations = 0

    def command(self, t: float, x: np.ndarray, ref: ReferenceTrajectory | None) -> tuple[float, bool]:
        y_ref = ref.Y(t) if ref is not None else 0.0
        e = np.array([x[1] - y_ref, x[2], x[3], x[4]])
        delta = float(-self.gain.row @ e)
        if self.steer_limit is not None and abs(delta) > self.steer_limit:
            return float(np.copysign(self.steer_limit, delta)), True
        return delta, False

    def rhs(self, ref: ReferenceTrajectory | None) -> Callable[[float, np.ndarray], np.ndarray]:
        A, b, v = self.A, self.b, self.params.v_T

        def f(t, x):
            delta, _ = self.command(t, x, ref)
            out = np.empty(5)
            out[0] = v
            out[1:] = A @ x[1:] + b * delta
            return out

        return f

    def step(self, t: float, x: np.ndarray, dt: float, ref: ReferenceTrajectory | None) -> np.ndarray:
        _, sat = self.command(t, x, ref)
        self.saturations += int(sat)
        return rk4_step(self.rhs(ref), t, x, dt)

    def predict(self, t0: float, x: np.ndarray, ref: ReferenceTrajectory | None, times: Sequence[float],
                dt: float = 5e-3) -> np.ndarray:
        """States at ``times`` (all ``>= t0``) if the loop keeps tracking ``ref``.

        A coarser step than the simulation's is fine here: the fastest closed-loop
        mode is about 14 rad/s.  Saturation counts are left untouched.
        """
        f = self.rhs(ref)
        out = np.empty((len(times), 5))
        t, z = t0, np.asarray(x, dtype=float).copy()
        for i, target in enumerate(times):
            if target < t - 1e-12:
                raise ValueError("prediction times must be nondecreasing and >= t0")
            while target - t > 1e-12:
                h = min(dt, target - t)
                z = rk4_step(f, t, z, h)
                t += h
            out[i] = z
        return out


def integrate(state: EgoState | np.ndarray, controller: Callable[[float, np.ndarray], float],
              dt: float, duration: float, params: VehicleParams = VehicleParams()) -> np.ndarray:
    """RK4 trace of the closed loop; rows are ``(t, X, Y, Psi, alpha_T, Psi_dot, delta)``.

    ``X`` is advanced in closed form so the longitudinal channel is exact.
    """
    if dt <= 0 or dt >= duration:
        raise ValueError("need 0 < dt < duration")
    x = state.to_array() if isinstance(state, EgoState) else np.asarray(state, dtype=float).copy()
    A, B = lateral_matrices(params)
    b = B[:, 0]

    def f(t, z):
        out = np.empty(5)
        out[0] = params.v_T
        out[1:] = A @ z[1:] + b * controller(t, z)
        return out

    steps = int(round(duration / dt))
    trace = np.empty((steps + 1, 7))
    X0 = x[0]
    for k in range(steps + 1):
        t = k * dt
        x[0] = X0 + params.v_T * t
        trace[k, 0] = t
        trace[k, 1:6] = x
        trace[k, 6] = controller(t, x)
        if k < steps:
            x = rk4_step(f, t, x, dt)
    return trace
