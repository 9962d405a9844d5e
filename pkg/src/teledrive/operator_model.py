"""Simulated human operator: feedback-linearized path tracking plus the
visual-feedback blending term, and a time-indexed velocity reference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mpc import OperatorReference
from .vehicle import VehicleParams, VehicleState


@dataclass(frozen=True)
class OperatorConfig:
    gamma1: float = 1.0     # lateral error gain
    gamma2: float = 2.0     # heading error gain
    gamma3: float = 0.25    # blend toward the currently displayed steering
    lookahead: float = 5.0  # arc length ahead of the closest path point (m)
    v_floor: float = 0.5    # below this speed the last steering command is held

    def __post_init__(self) -> None:
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("gamma1 and gamma2 must be positive")
        if not 0.0 <= self.gamma3 <= 1.0:
            raise ValueError("gamma3 must lie in [0, 1]")
        if self.lookahead <= 0:
            raise ValueError("lookahead must be positive")


@dataclass(frozen=True)
class TrackingErrors:
    e_lat: float   # signed lateral offset of the CoM, positive left of the path (m)
    e_head: float  # heading minus path tangent, wrapped to (-pi, pi] (rad)


class Path:
    """Polyline reference path with arc-length parameterization."""

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("path needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("path points must have strictly increasing arc length")
        self.points = pts
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def project(self, x: float, y: float) -> float:
        """Arc length of the closest point on the polyline."""
        rel = np.array([x, y]) - self.points[:-1]
        t = np.clip((rel * self._seg).sum(axis=1) / self._seg_len**2, 0.0, 1.0)
        closest = self.points[:-1] + t[:, None] * self._seg
        d2 = ((np.array([x, y]) - closest) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        return float(self._cum[i] + t[i] * self._seg_len[i])

    def point_at(self, arc: float) -> tuple[np.ndarray, float]:
        """Point and tangent heading at a clamped arc length."""
        arc = min(max(arc, 0.0), self.length)
        i = int(np.searchsorted(self._cum, arc, side="right") - 1)
        i = min(i, len(self._seg) - 1)
        t = (arc - self._cum[i]) / self._seg_len[i]
        point = self.points[i] + t * self._seg[i]
        tangent = math.atan2(self._seg[i, 1], self._seg[i, 0])
        return point, tangent


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def tracking_point(state: VehicleState, path: Path, lookahead: float) -> tuple[np.ndarray, float]:
    """Closest path point advanced by the lookahead arc length, clamped to the end."""
    arc = path.project(state.x, state.y)
    return path.point_at(arc + lookahead)


def compute_errors(state: VehicleState, point: np.ndarray, tangent: float) -> TrackingErrors:
    """Lateral and heading error in the tangent frame of the tracking point.

    e_lat is positive when the vehicle sits to the left of the path, so the
    steering law corrects rightward; e_head is the vehicle heading error.
    """
    dx = state.x - point[0]
    dy = state.y - point[1]
    e_lat = -math.sin(tangent) * dx + math.cos(tangent) * dy
    return TrackingErrors(e_lat=e_lat, e_head=wrap_angle(state.psi - tangent))


def fbl_steer(errors: TrackingErrors, v: float, config: OperatorConfig,
              prev_delta: float = 0.0) -> float:
    """Feedback-linearized steering command.

    Holds the previous command at standstill (the law divides by v^2) and
    when the heading error leaves the linearizing domain.
    """
    if v <= config.v_floor or abs(errors.e_head) >= math.pi / 2:
        return prev_delta
    num = -config.gamma1 * errors.e_lat - config.gamma2 * v * math.sin(errors.e_head)
    return math.atan(num / (v**2 * math.cos(errors.e_head)))


class SpeedProfile:
    """Piecewise-constant reference speed over time."""

    def __init__(self, breakpoints) -> None:
        pts = [(float(t), float(v)) for t, v in breakpoints]
        if not pts:
            raise ValueError("speed profile needs at least one (t, v) breakpoint")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("speed profile breakpoints must increase in time")
        self.breakpoints = pts

    def value(self, t: float) -> float:
        v = self.breakpoints[0][1]
        for t_k, v_k in self.breakpoints:
            if t < t_k:
                break
            v = v_k
        return v


class SimulatedOperator:
    """Reference producer driving the workstation side of the loop.

    The same contract is implemented by the live-command source in the
    teleop gateway: reference(displayed_state, t) -> OperatorReference.
    """

    def __init__(self, config: OperatorConfig, path: Path, speed_profile: SpeedProfile,
                 params: VehicleParams):
        self.config = config
        self.path = path
        self.speed_profile = speed_profile
        self.params = params
        self._last_steer = 0.0

    def reference(self, displayed_state: VehicleState, t: float) -> OperatorReference:
        point, tangent = tracking_point(displayed_state, self.path, self.config.lookahead)
        errors = compute_errors(displayed_state, point, tangent)
        steer = fbl_steer(errors, displayed_state.v, self.config, self._last_steer)
        self._last_steer = steer
        # Visual feedback pulls the command toward the steering the operator
        # currently sees on the display.
        delta_ref = steer + self.config.gamma3 * (displayed_state.delta - steer)
        delta_ref = min(max(delta_ref, self.params.delta_min), self.params.delta_max)
        v_ref = self.speed_profile.value(t)
        v_ref = min(max(v_ref, self.params.v_min), self.params.v_max)
        return OperatorReference(delta_ref=delta_ref, v_ref=v_ref)

    def reset(self) -> None:
        self._last_steer = 0.0
