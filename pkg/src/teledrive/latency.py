"""Latency modeling: delay buffers, the two predictive-display schemes,
and the controller-authority cone shown on the workstation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .mpc import MpcConfig, OcpSolution
from .vehicle import ControlInput, VehicleParams, VehicleState, integrate_step


@dataclass(frozen=True)
class LatencyConfig:
    actuator_s: float = 0.0  # workstation -> vehicle
    glass_s: float = 0.0     # vehicle -> workstation

    def __post_init__(self) -> None:
        if self.actuator_s < 0 or self.glass_s < 0:
            raise ValueError("latencies must be nonnegative")

    @property
    def round_trip_s(self) -> float:
        return self.actuator_s + self.glass_s

    def steps(self, t_s: float) -> tuple[int, int]:
        """Delay step counts; both latencies must be multiples of t_s."""
        out = []
        for name, value in (("actuator", self.actuator_s), ("glass", self.glass_s)):
            k = round(value / t_s)
            if abs(k * t_s - value) > 1e-9:
                raise ValueError(f"{name} latency {value} s is not a multiple of t_s={t_s} s")
            out.append(k)
        return out[0], out[1]


class DelayBuffer:
    """Fixed-delay FIFO over simulation steps.

    step(record) pushes the current record and returns the one from
    `delay_steps` steps ago; until the buffer has filled it returns the
    configured neutral element.
    """

    def __init__(self, delay_steps: int, neutral):
        if delay_steps < 0:
            raise ValueError("delay must be nonnegative")
        self.delay_steps = delay_steps
        self.neutral = neutral
        self._queue: deque = deque()

    def step(self, record):
        self._queue.append(record)
        if len(self._queue) > self.delay_steps:
            return self._queue.popleft()
        return self.neutral

    def __len__(self) -> int:
        return len(self._queue)


def predictive_display_baseline(delayed_state: VehicleState, round_trip: float,
                                t_s: float, params: VehicleParams) -> VehicleState:
    """Constant-speed, constant-steering rollout of the delayed state."""
    if round_trip < 0:
        raise ValueError("round_trip must be nonnegative")
    state = delayed_state
    hold = ControlInput(0.0, 0.0)
    steps = round(round_trip / t_s)
    for _ in range(steps):
        state = integrate_step(state, hold, t_s, params)
    return state


def predictive_display_mpc(solution: OcpSolution, round_trip: float, t_s: float) -> VehicleState:
    """Read the controller's predicted state one round trip ahead."""
    k = round(round_trip / t_s)
    if k < 0 or k >= len(solution.states):
        raise ValueError("round trip must lie within the prediction horizon")
    return solution.states[k]


@dataclass
class AuthorityCone:
    left: np.ndarray       # (N+1, 3) poses under maximum-left intervention
    right: np.ndarray      # (N+1, 3) poses under maximum-right intervention
    predicted: np.ndarray  # (N+1, 3) poses of the controller plan


def authority_cone(state: VehicleState, delta_ref: float, solution: OcpSolution,
                   config: MpcConfig, params: VehicleParams) -> AuthorityCone:
    """Bounding trajectories of the controller's steering authority.

    Each edge steers toward the corresponding authority-band limit at the
    rate limit, then holds, following the speed plan of the solution so the
    edges stay arc-length-consistent with the predicted path.
    """
    v_plan = np.array([st.v for st in solution.states])
    n = config.horizon

    def rollout(delta_target: float) -> np.ndarray:
        target = min(max(delta_target, params.delta_min), params.delta_max)
        st = state
        poses = np.empty((n + 1, 3))
        poses[0] = (st.x, st.y, st.psi)
        for k in range(n):
            rate = (target - st.delta) / config.t_s
            rate = min(max(rate, params.delta_rate_min), params.delta_rate_max)
            accel = (v_plan[k + 1] - st.v) / config.t_s
            accel = min(max(accel, params.a_min), params.a_max)
            st = integrate_step(st, ControlInput(rate, accel), config.t_s, params)
            poses[k + 1] = (st.x, st.y, st.psi)
        return poses

    predicted = np.array([[st.x, st.y, st.psi] for st in solution.states])
    return AuthorityCone(
        left=rollout(delta_ref + config.delta_dev_max),
        right=rollout(delta_ref + config.delta_dev_min),
        predicted=predicted,
    )
