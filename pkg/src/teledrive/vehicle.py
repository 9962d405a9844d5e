"""Kinematic bicycle model: continuous dynamics, RK4 discretization, fine-step plant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Sub-steps per sampling interval used by the ground-truth plant.
PLANT_SUBSTEPS = 10


@dataclass(frozen=True)
class VehicleParams:
    l_f: float = 1.45          # CoM -> front axle (m)
    l_r: float = 1.45          # CoM -> rear axle (m)
    delta_min: float = -0.6    # road wheel angle bounds (rad)
    delta_max: float = 0.6
    delta_rate_min: float = -0.35  # steering rate bounds (rad/s)
    delta_rate_max: float = 0.35
    v_min: float = 0.0         # speed bounds (m/s)
    v_max: float = 10.0
    a_min: float = -3.0        # acceleration bounds (m/s^2)
    a_max: float = 2.0

    def __post_init__(self) -> None:
        if self.l_f <= 0 or self.l_r <= 0:
            raise ValueError("axle distances must be positive")
        for lo, hi, name in (
            (self.delta_min, self.delta_max, "delta"),
            (self.delta_rate_min, self.delta_rate_max, "delta_rate"),
            (self.v_min, self.v_max, "v"),
            (self.a_min, self.a_max, "a"),
        ):
            if not lo < hi:
                raise ValueError(f"{name} limits must satisfy min < max")
        if self.v_min < 0:
            raise ValueError("v_min must be >= 0")


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0       # inertial x of CoM (m)
    y: float = 0.0       # inertial y of CoM (m)
    psi: float = 0.0     # heading, unwrapped (rad)
    delta: float = 0.0   # road wheel angle (rad)
    v: float = 0.0       # speed (m/s)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.delta, self.v])

    @staticmethod
    def from_array(z: np.ndarray) -> "VehicleState":
        return VehicleState(float(z[0]), float(z[1]), float(z[2]), float(z[3]), float(z[4]))


@dataclass(frozen=True)
class ControlInput:
    delta_rate: float = 0.0  # steering rate (rad/s)
    a: float = 0.0           # CoM acceleration (m/s^2)

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_rate, self.a])


def slip_angle(delta: float, params: VehicleParams) -> float:
    """Velocity-vector angle beta relative to the longitudinal axis."""
    ratio = params.l_r / (params.l_f + params.l_r)
    return math.atan(ratio * math.tan(delta))


def state_derivative(state: VehicleState, inp: ControlInput, params: VehicleParams) -> np.ndarray:
    """Continuous-time state rate [xdot, ydot, psidot, deltadot, vdot]."""
    beta = slip_angle(state.delta, params)
    return np.array((
        state.v * math.cos(state.psi + beta),
        state.v * math.sin(state.psi + beta),
        state.v / params.l_r * math.sin(beta),
        inp.delta_rate,
        inp.a,
    ))


def _deriv_array(z: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Vectorized state rate for stacked states z (..., 5) and inputs u (..., 2)."""
    psi, delta, v = z[..., 2], z[..., 3], z[..., 4]
    beta = np.arctan(params.l_r / (params.l_f + params.l_r) * np.tan(delta))
    out = np.empty_like(z)
    out[..., 0] = v * np.cos(psi + beta)
    out[..., 1] = v * np.sin(psi + beta)
    out[..., 2] = v / params.l_r * np.sin(beta)
    out[..., 3] = u[..., 0]
    out[..., 4] = u[..., 1]
    return out


def rk4_step_array(z: np.ndarray, u: np.ndarray, dt: float, params: VehicleParams) -> np.ndarray:
    """One explicit RK4 step with zero-order-hold input, on stacked arrays."""
    k1 = _deriv_array(z, u, params)
    k2 = _deriv_array(z + 0.5 * dt * k1, u, params)
    k3 = _deriv_array(z + 0.5 * dt * k2, u, params)
    k4 = _deriv_array(z + dt * k3, u, params)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(state: VehicleState, inp: ControlInput, dt: float, params: VehicleParams) -> VehicleState:
    """One RK4 step of the bicycle ODE; also the MPC prediction map at dt = t_s."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = rk4_step_array(state.as_array(), inp.as_array(), dt, params)
    return VehicleState.from_array(z)


def plant_step(state: VehicleState, inp: ControlInput, params: VehicleParams, t_s: float) -> VehicleState:
    """Ground-truth plant: 10 RK4 sub-steps with delta and v clamped after each.

    The clamp makes actuator saturation explicit, so commanded inputs that
    would push past the physical limits hold the state at the limit instead.
    """
    z = state.as_array()
    u = inp.as_array()
    dt = t_s / PLANT_SUBSTEPS
    for _ in range(PLANT_SUBSTEPS):
        z = rk4_step_array(z, u, dt, params)
        z[3] = min(max(z[3], params.delta_min), params.delta_max)
        z[4] = min(max(z[4], params.v_min), params.v_max)
    return VehicleState.from_array(z)


def _jac_continuous(z: np.ndarray, params: VehicleParams) -> np.ndarray:
    """d(state rate)/d(state), batched over stages: z (N, 5) -> (N, 5, 5).

    The input Jacobian is constant (rows 3, 4 pick up the input directly),
    see B_CONT below.
    """
    n = z.shape[0]
    psi, delta, v = z[:, 2], z[:, 3], z[:, 4]
    ratio = params.l_r / (params.l_f + params.l_r)
    t = np.tan(delta)
    beta = np.arctan(ratio * t)
    # d(beta)/d(delta)
    dbeta = ratio * (1.0 + t * t) / (1.0 + (ratio * t) ** 2)
    c, s = np.cos(psi + beta), np.sin(psi + beta)
    A = np.zeros((n, 5, 5))
    A[:, 0, 2] = -v * s
    A[:, 0, 3] = -v * s * dbeta
    A[:, 0, 4] = c
    A[:, 1, 2] = v * c
    A[:, 1, 3] = v * c * dbeta
    A[:, 1, 4] = s
    A[:, 2, 3] = v / params.l_r * np.cos(beta) * dbeta
    A[:, 2, 4] = np.sin(beta) / params.l_r
    return A


B_CONT = np.zeros((5, 2))
B_CONT[3, 0] = 1.0
B_CONT[4, 1] = 1.0


def rk4_jacobians(z: np.ndarray, u: np.ndarray, dt: float, params: VehicleParams):
    """Exact Jacobians of the RK4 map, batched over stages.

    Returns (z_next, F_z, F_u) with shapes (N, 5), (N, 5, 5), (N, 5, 2),
    propagating the stage sensitivities through the four RK4 evaluations.
    """
    n = z.shape[0]
    eye = np.broadcast_to(np.eye(5), (n, 5, 5))
    B = np.broadcast_to(B_CONT, (n, 5, 2))

    k1 = _deriv_array(z, u, params)
    A1 = _jac_continuous(z, params)
    dk1z, dk1u = A1, B

    z2 = z + 0.5 * dt * k1
    k2 = _deriv_array(z2, u, params)
    A2 = _jac_continuous(z2, params)
    dk2z = A2 @ (eye + 0.5 * dt * dk1z)
    dk2u = A2 @ (0.5 * dt * dk1u) + B

    z3 = z + 0.5 * dt * k2
    k3 = _deriv_array(z3, u, params)
    A3 = _jac_continuous(z3, params)
    dk3z = A3 @ (eye + 0.5 * dt * dk2z)
    dk3u = A3 @ (0.5 * dt * dk2u) + B

    z4 = z + dt * k3
    k4 = _deriv_array(z4, u, params)
    A4 = _jac_continuous(z4, params)
    dk4z = A4 @ (eye + dt * dk3z)
    dk4u = A4 @ (dt * dk3u) + B

    z_next = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    F_z = eye + (dt / 6.0) * (dk1z + 2.0 * dk2z + 2.0 * dk3z + dk4z)
    F_u = (dt / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return z_next, F_z, F_u
