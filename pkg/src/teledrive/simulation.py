"""Deterministic closed-loop simulation: latency wiring, controller-in-the-loop
stepping, collision ground truth, metrics and reproducible logs."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .latency import (DelayBuffer, predictive_display_baseline, predictive_display_mpc)
from .mpc import (Controller, OcpSolution, OperatorReference, elongate_dynamic_obstacles)
from .obstacles import Obstacle, potential_total, rectangle_corners
from .operator_model import SimulatedOperator
from .scenario import ScenarioConfig, validate_metrics
from .vehicle import ControlInput, VehicleState, plant_step


@dataclass
class StepRecord:
    t: float
    plant: VehicleState
    delayed: VehicleState      # raw state feedback as the workstation receives it
    displayed: VehicleState    # what the operator actually sees (ghost when display on)
    ref: OperatorReference
    inp: ControlInput
    status: str
    iterations: int
    kkt_residual: float
    cost: float
    potential: float
    min_clearance: float
    delta_deviation: float     # |predicted next delta - delta_ref| of this step's OCP
    s_delta: float
    s_pot: float
    solve_time: float          # wall clock; excluded from the CSV for determinism


@dataclass
class RunMetrics:
    collided: bool
    collision_t: float | None
    min_clearance: float
    max_delta_deviation: float
    max_slack_delta: float
    max_slack_potential: float
    v_min: float
    v_mean: float
    v_final: float
    solve_time_mean_ms: float
    solve_time_max_ms: float
    solve_time_p99_ms: float
    sqp_iterations_mean: float
    sqp_iterations_max: int
    status_counts: dict = field(default_factory=dict)
    fallback_steps: int = 0
    steps: int = 0
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        doc = {
            "collided": self.collided,
            "collision_t": self.collision_t,
            "min_clearance": self.min_clearance,
            "max_delta_deviation": self.max_delta_deviation,
            "max_slack_delta": self.max_slack_delta,
            "max_slack_potential": self.max_slack_potential,
            "v_min": self.v_min,
            "v_mean": self.v_mean,
            "v_final": self.v_final,
            "solve_time_mean_ms": self.solve_time_mean_ms,
            "solve_time_max_ms": self.solve_time_max_ms,
            "solve_time_p99_ms": self.solve_time_p99_ms,
            "sqp_iterations_mean": self.sqp_iterations_mean,
            "sqp_iterations_max": self.sqp_iterations_max,
            "status_counts": self.status_counts,
            "fallback_steps": self.fallback_steps,
            "steps": self.steps,
            "duration_s": self.duration_s,
        }
        validate_metrics(doc)
        return doc


def _points_to_segments(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Min distance from each point to each segment, batched."""
    ab = b - a                                          # (m, 2)
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)   # (m,)
    rel = points[:, None, :] - a[None, :, :]            # (p, m, 2)
    t = np.clip((rel * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[:, :, None] * ab[None]
    d2 = ((points[:, None, :] - closest) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))


def rectangles_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given as corners."""
    edges = np.vstack([np.roll(ca, -1, axis=0) - ca, np.roll(cb, -1, axis=0) - cb])
    axes = np.stack([-edges[:, 1], edges[:, 0]], axis=1)  # (8, 2)
    pa = ca @ axes.T
    pb = cb @ axes.T
    sep = (pa.max(axis=0) < pb.min(axis=0)) | (pb.max(axis=0) < pa.min(axis=0))
    return not bool(sep.any())


def rectangle_clearance(ca: np.ndarray, cb: np.ndarray) -> float:
    """Distance between two rectangles; 0 when they overlap or touch."""
    if rectangles_overlap(ca, cb):
        return 0.0
    sa, ea = ca, np.roll(ca, -1, axis=0)
    sb, eb = cb, np.roll(cb, -1, axis=0)
    return min(_points_to_segments(ca, sb, eb), _points_to_segments(cb, sa, ea))


def _advance_obstacles(obstacles: list[Obstacle], t: float) -> list[Obstacle]:
    """Obstacle poses at time t under constant heading and speed."""
    out = []
    for ob in obstacles:
        if ob.speed == 0.0:
            out.append(ob)
        else:
            out.append(Obstacle(
                x=ob.x + ob.speed * t * np.cos(ob.phi),
                y=ob.y + ob.speed * t * np.sin(ob.phi),
                phi=ob.phi, length=ob.length, breadth=ob.breadth,
                speed=ob.speed, order=ob.order,
            ))
    return out


def _clearance(state: VehicleState, obstacles: list[Obstacle],
               length: float, breadth: float) -> float:
    """True footprint-to-footprint clearance against every obstacle."""
    if not obstacles:
        return np.inf
    ego = rectangle_corners(state.x, state.y, state.psi, length, breadth)
    return min(rectangle_clearance(
        ego, rectangle_corners(ob.x, ob.y, ob.phi, ob.length, ob.breadth))
        for ob in obstacles)


def run(config: ScenarioConfig, reference_source=None, frame_sink=None
        ) -> tuple[RunMetrics, list[StepRecord]]:
    """Fixed-step closed loop at t_s; deterministic given the configuration.

    reference_source substitutes the simulated operator (same contract);
    frame_sink, when given, observes each step without affecting the run.
    """
    cfg = config.mpc
    params = config.params
    t_s = cfg.t_s
    act_steps, glass_steps = config.latency.steps(t_s)
    round_trip = config.latency.round_trip_s

    source = reference_source
    if source is None:
        source = SimulatedOperator(config.operator, config.path, config.speed_profile, params)

    controller = None
    if config.mode in ("ass", "baseline_controller"):
        controller = Controller(params, config.discs, config.potential, cfg,
                                mode="ass" if config.mode == "ass" else "baseline")

    plant = config.initial_state
    # Warm session start: buffers are pre-filled with the steady pre-run signals,
    # so latency shows up as signal age rather than a startup transient.
    ref0 = source.reference(plant, 0.0)
    if hasattr(source, "reset"):
        source.reset()
    glass_buf = DelayBuffer(glass_steps, neutral=plant)
    act_buf = DelayBuffer(act_steps, neutral=ref0)
    sol_buf = DelayBuffer(max(glass_steps - 1, 0), neutral=None)

    prev_sol: OcpSolution | None = None
    records: list[StepRecord] = []
    collision_t = None

    for n in range(config.steps):
        t = n * t_s
        delayed_state = glass_buf.step(plant)
        delayed_sol = sol_buf.step(prev_sol)

        if config.display == "baseline":
            displayed = predictive_display_baseline(delayed_state, round_trip, t_s, params)
        elif config.display == "mpc" and delayed_sol is not None:
            displayed = predictive_display_mpc(delayed_sol, round_trip, t_s)
        else:
            displayed = delayed_state

        ref_ws = source.reference(displayed, t)
        ref = act_buf.step(ref_ws)

        obstacles_now = _advance_obstacles(config.obstacles, t)
        obstacles_ctrl = elongate_dynamic_obstacles(obstacles_now, cfg.horizon, t_s)

        t0 = time.perf_counter()
        if controller is not None:
            inp, sol = controller.step(plant, ref, obstacles_ctrl)
            status, iters, kkt = sol.status, sol.iterations, sol.kkt_residual
            cost = sol.cost
            s_delta = float(sol.slacks[:, 0].max())
            s_pot = float(sol.slacks[:, 1].max())
            delta_dev = abs(sol.states[1].delta - ref.delta_ref)
        else:
            rate = (ref.delta_ref - plant.delta) / t_s
            rate = min(max(rate, params.delta_rate_min), params.delta_rate_max)
            accel = (ref.v_ref - plant.v) / t_s
            accel = min(max(accel, params.a_min), params.a_max)
            inp, sol = ControlInput(rate, accel), None
            status, iters, kkt, cost = "open_loop", 0, 0.0, 0.0
            s_delta = s_pot = 0.0
            delta_dev = abs(min(max(plant.delta + t_s * rate, params.delta_min),
                                params.delta_max) - ref.delta_ref)
        solve_time = time.perf_counter() - t0

        clearance = _clearance(plant, obstacles_now, config.footprint_length,
                               config.footprint_breadth)
        pot = potential_total(plant, obstacles_now, config.discs, config.potential)
        if clearance <= 0.0 and collision_t is None:
            collision_t = t

        rec = StepRecord(
            t=t, plant=plant, delayed=delayed_state, displayed=displayed, ref=ref, inp=inp,
            status=status, iterations=iters, kkt_residual=kkt, cost=cost,
            potential=pot, min_clearance=clearance, delta_deviation=delta_dev,
            s_delta=s_delta, s_pot=s_pot, solve_time=solve_time,
        )
        records.append(rec)
        if frame_sink is not None:
            frame_sink(n, rec, sol, obstacles_now)

        if collision_t is not None:
            # Contact ends the run; the kinematic model is meaningless inside
            # another body.
            break

        plant = plant_step(plant, inp, params, t_s)
        prev_sol = sol

    return _metrics(config, records, collision_t), records


def _metrics(config: ScenarioConfig, records: list[StepRecord],
             collision_t: float | None) -> RunMetrics:
    v = np.array([r.plant.v for r in records]) if records else np.zeros(1)
    solve_ms = np.array([r.solve_time for r in records]) * 1e3 if records else np.zeros(1)
    iters = np.array([r.iterations for r in records]) if records else np.zeros(1, dtype=int)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.status] = counts.get(r.status, 0) + 1
    return RunMetrics(
        collided=collision_t is not None,
        collision_t=collision_t,
        min_clearance=float(min((r.min_clearance for r in records), default=np.inf)),
        max_delta_deviation=float(max((r.delta_deviation for r in records), default=0.0)),
        max_slack_delta=float(max((r.s_delta for r in records), default=0.0)),
        max_slack_potential=float(max((r.s_pot for r in records), default=0.0)),
        v_min=float(v.min()),
        v_mean=float(v.mean()),
        v_final=float(v[-1]),
        solve_time_mean_ms=float(solve_ms.mean()),
        solve_time_max_ms=float(solve_ms.max()),
        solve_time_p99_ms=float(np.percentile(solve_ms, 99)),
        sqp_iterations_mean=float(iters.mean()),
        sqp_iterations_max=int(iters.max()),
        status_counts=counts,
        fallback_steps=counts.get("infeasible_qp", 0),
        steps=len(records),
        duration_s=len(records) * config.mpc.t_s,
    )


def compare_runs(a: list[StepRecord], b: list[StepRecord]) -> dict:
    """CoM deviation between two runs at matching timestamps."""
    n = min(len(a), len(b))
    if n == 0:
        return {"max_deviation": 0.0, "mean_deviation": 0.0, "steps": 0}
    for ra, rb in zip(a[:n], b[:n]):
        if abs(ra.t - rb.t) > 1e-9:
            raise ValueError("runs must share the same sampling grid")
    d = np.array([np.hypot(ra.plant.x - rb.plant.x, ra.plant.y - rb.plant.y)
                  for ra, rb in zip(a[:n], b[:n])])
    return {"max_deviation": float(d.max()), "mean_deviation": float(d.mean()), "steps": n}


CSV_COLUMNS = [
    "t", "x", "y", "psi", "delta", "v",
    "del_x", "del_y", "del_psi", "del_delta", "del_v",
    "disp_x", "disp_y", "disp_psi", "disp_delta", "disp_v",
    "delta_ref", "v_ref", "u_delta_rate", "u_a",
    "status", "iterations", "kkt_residual", "cost", "potential",
    "min_clearance", "delta_deviation", "s_delta", "s_pot",
]


def emit_logs(records: list[StepRecord], metrics: RunMetrics, out_dir: str,
              config: ScenarioConfig) -> None:
    """Write steps.csv, metrics.json and the resolved config for reproduction.

    Wall-clock solver timings stay out of the CSV so re-running the same
    configuration produces byte-identical step logs.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "steps.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                repr(r.t),
                repr(r.plant.x), repr(r.plant.y), repr(r.plant.psi),
                repr(r.plant.delta), repr(r.plant.v),
                repr(r.delayed.x), repr(r.delayed.y), repr(r.delayed.psi),
                repr(r.delayed.delta), repr(r.delayed.v),
                repr(r.displayed.x), repr(r.displayed.y), repr(r.displayed.psi),
                repr(r.displayed.delta), repr(r.displayed.v),
                repr(r.ref.delta_ref), repr(r.ref.v_ref),
                repr(r.inp.delta_rate), repr(r.inp.a),
                r.status, r.iterations, repr(r.kkt_residual), repr(r.cost),
                repr(r.potential), repr(r.min_clearance), repr(r.delta_deviation),
                repr(r.s_delta), repr(r.s_pot),
            ])
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.resolved, fh, indent=2)
        fh.write("\n")


def read_steps_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
