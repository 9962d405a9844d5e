"""Finite-horizon optimal control problem of the active safety system and its SQP solver.

The OCP is a multiple-shooting transcription: decision variables are the N
shooting states, N inputs and N slack pairs. Each SQP iteration linearizes
the shooting constraints, condenses the state steps onto the input steps and
solves a dense convex QP (see qp.py). The first input of the solution is
applied in closed loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .obstacles import (EgoDiscs, Obstacle, PackedObstacles, PotentialParams,
                        disc_field, pack_obstacles)
from .qp import solve_qp
from .vehicle import ControlInput, VehicleParams, VehicleState, rk4_jacobians, rk4_step_array

# Curvature floor for the Gauss-Newton surrogate of the potential term.
_P_FLOOR = 1e-12
# Slack values below this are interior-point dust and snap to zero.
_SLACK_SNAP = 1e-7
# Soft pin weight used by the lateral-only baseline controller to hold the
# acceleration at the proportional cruise law value.
_W_PIN = 1e8
_CC_GAIN = 1.0  # proportional cruise gain of the baseline mode (1/s)

# Row screening margins: rows further than this from their bound are left out
# of the QP and re-added if a step lands on them.
_MARGIN_DELTA = 0.1   # rad
_MARGIN_V = 0.5       # m/s
_POT_SCREEN = 0.15    # include potential rows with P > _POT_SCREEN * tau


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 40
    t_s: float = 0.05
    w_potential: float = 0.1
    w_delta: float = 1000.0
    w_v: float = 1.0
    w_slack: float = 1e5
    delta_dev_min: float = -0.07
    delta_dev_max: float = 0.07
    max_sqp_iter: int = 30
    kkt_tol: float = 5e-7
    qp_reg: float = 1e-6
    qp_max_iter: int = 60
    qp_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")
        if min(self.w_potential, self.w_delta, self.w_v, self.w_slack) < 0:
            raise ValueError("weights must be nonnegative")
        if not self.delta_dev_min < 0 < self.delta_dev_max:
            raise ValueError("authority band must contain zero strictly")


@dataclass(frozen=True)
class OperatorReference:
    delta_ref: float
    v_ref: float


@dataclass
class OcpSolution:
    inputs: list[ControlInput]
    states: list[VehicleState]       # N+1 exact rollout, states[0] = measured
    slacks: np.ndarray               # (N, 2): (s_delta, s_pot) per stage
    cost: float
    kkt_residual: float
    iterations: int
    solve_time: float
    status: str                      # converged | max_iter | infeasible_qp
    z_nodes: np.ndarray = field(default=None, repr=False)   # shooting nodes (N+1, 5)
    u: np.ndarray = field(default=None, repr=False)         # (N, 2)
    lam_dyn: np.ndarray = field(default=None, repr=False)   # (N, 5)
    mult: dict = field(default_factory=dict, repr=False)


@dataclass
class OcpProblem:
    z0: np.ndarray
    ref: OperatorReference
    obstacles: list[Obstacle]
    packed: PackedObstacles
    params: VehicleParams
    discs: EgoDiscs
    potential: PotentialParams
    config: MpcConfig
    authority_enabled: bool = True
    pinned_accel: float | None = None   # baseline mode: soft-pinned acceleration

    @property
    def decision_var_count(self) -> int:
        # N shooting states (5), N inputs (2), N slack pairs (2); z_0 is pinned.
        return self.config.horizon * (5 + 2 + 2)

    @property
    def potential_row_count(self) -> int:
        # One cap per disc per stage regardless of the number of obstacles.
        return 4 * self.config.horizon

    def stage_potentials(self, z_tail: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-disc potential and gradient at the N trailing nodes."""
        n = self.config.horizon
        if self.packed.count == 0:
            return np.zeros((n, 4)), np.zeros((n, 4, 3))
        return disc_field(z_tail[:, :3], self.packed, self.discs, self.potential)

    def cost_of(self, z: np.ndarray, u: np.ndarray, s: np.ndarray) -> float:
        """Objective at a (states, inputs, slacks) candidate; z is (N+1, 5)."""
        cfg = self.config
        tail = z[1:]
        p_disc, _ = self.stage_potentials(tail)
        cost = cfg.w_potential * p_disc.sum()
        cost += cfg.w_delta * np.sum((self.ref.delta_ref - tail[:, 3]) ** 2)
        cost += cfg.w_v * np.sum((self.ref.v_ref - tail[:, 4]) ** 2)
        cost += cfg.w_slack * np.sum(s**2)
        if self.pinned_accel is not None:
            cost += _W_PIN * np.sum((u[:, 1] - self.pinned_accel) ** 2)
        return float(cost)


def elongate_dynamic_obstacles(obstacles: list[Obstacle], horizon: int, t_s: float) -> list[Obstacle]:
    """Sweep moving obstacles over the horizon into larger static ones.

    Assumes constant heading and speed: the length grows by the swept
    distance and the center shifts by half of it along the heading.
    """
    out = []
    for ob in obstacles:
        if ob.speed <= 0.0:
            out.append(ob)
            continue
        sweep = ob.speed * horizon * t_s
        out.append(Obstacle(
            x=ob.x + 0.5 * sweep * np.cos(ob.phi),
            y=ob.y + 0.5 * sweep * np.sin(ob.phi),
            phi=ob.phi,
            length=ob.length + sweep,
            breadth=ob.breadth,
            speed=0.0,
            order=ob.order,
        ))
    return out


def build_ocp(state: VehicleState, ref: OperatorReference, obstacles: list[Obstacle],
              config: MpcConfig, params: VehicleParams = VehicleParams(),
              discs: EgoDiscs = EgoDiscs(), potential: PotentialParams = PotentialParams(),
              authority_enabled: bool = True, pinned_accel: float | None = None) -> OcpProblem:
    """Assemble the OCP for one sampling instant.

    The measured state is clamped into the hard bounds so plant noise at the
    margin cannot make the problem trivially infeasible.
    """
    z0 = state.as_array()
    z0[3] = min(max(z0[3], params.delta_min), params.delta_max)
    z0[4] = min(max(z0[4], params.v_min), params.v_max)
    ref = OperatorReference(
        delta_ref=min(max(ref.delta_ref, params.delta_min), params.delta_max),
        v_ref=min(max(ref.v_ref, params.v_min), params.v_max),
    )
    return OcpProblem(
        z0=z0, ref=ref, obstacles=list(obstacles),
        packed=pack_obstacles(obstacles, discs.radius),
        params=params, discs=discs, potential=potential, config=config,
        authority_enabled=authority_enabled, pinned_accel=pinned_accel,
    )


def _bounds_reachable(problem: OcpProblem) -> bool:
    """Interval reachability of the delta and v boxes under the input boxes.

    delta and v integrate their inputs exactly, so an empty reachable
    interval at any stage proves the OCP infeasible before any QP is run.
    """
    p, cfg = problem.params, problem.config
    lo_d = hi_d = problem.z0[3]
    lo_v = hi_v = problem.z0[4]
    for _ in range(cfg.horizon):
        lo_d = max(lo_d + p.delta_rate_min * cfg.t_s, p.delta_min)
        hi_d = min(hi_d + p.delta_rate_max * cfg.t_s, p.delta_max)
        lo_v = max(lo_v + p.a_min * cfg.t_s, p.v_min)
        hi_v = min(hi_v + p.a_max * cfg.t_s, p.v_max)
        if lo_d > hi_d + 1e-12 or lo_v > hi_v + 1e-12:
            return False
    return True


def _rollout(z0: np.ndarray, u: np.ndarray, t_s: float, params: VehicleParams) -> np.ndarray:
    n = len(u)
    z = np.empty((n + 1, 5))
    z[0] = z0
    for k in range(n):
        z[k + 1] = rk4_step_array(z[k], u[k], t_s, params)
    return z


def _initial_iterate(problem: OcpProblem, warm: OcpSolution | None):
    cfg = problem.config
    p = problem.params
    n = cfg.horizon
    if warm is not None and warm.u is not None and len(warm.u) == n:
        # Shift the previous solution by one stage and keep its shooting nodes;
        # the new measured state enters through the stage-0 defect.
        u = np.vstack([warm.u[1:], warm.u[-1:]])
        u[:, 0] = np.clip(u[:, 0], p.delta_rate_min, p.delta_rate_max)
        u[:, 1] = np.clip(u[:, 1], p.a_min, p.a_max)
        z = np.empty((n + 1, 5))
        z[0] = problem.z0
        z[1:n] = warm.z_nodes[2:]
        z[n] = rk4_step_array(warm.z_nodes[-1], u[-1], cfg.t_s, p)
        z[1:, 3] = np.clip(z[1:, 3], p.delta_min, p.delta_max)
        z[1:, 4] = np.clip(z[1:, 4], p.v_min, p.v_max)
    else:
        u = np.zeros((n, 2))
        if problem.pinned_accel is not None:
            u[:, 1] = np.clip(problem.pinned_accel, p.a_min, p.a_max)
        z = _rollout(problem.z0, u, cfg.t_s, p)
        # Rate inputs keep delta/v inside their boxes for the initial iterate.
        for k in range(n):
            d_next = z[k, 3] + cfg.t_s * u[k, 0]
            if d_next > p.delta_max or d_next < p.delta_min:
                u[k, 0] = (min(max(d_next, p.delta_min), p.delta_max) - z[k, 3]) / cfg.t_s
            v_next = z[k, 4] + cfg.t_s * u[k, 1]
            if v_next > p.v_max or v_next < p.v_min:
                u[k, 1] = (min(max(v_next, p.v_min), p.v_max) - z[k, 4]) / cfg.t_s
            z[k + 1] = rk4_step_array(z[k], u[k], cfg.t_s, p)
    # Slacks sit at their optimum for the iterate: the soft-constraint violation.
    s = _soft_violations(problem, z)
    s[s < _SLACK_SNAP] = 0.0
    return z, u, s


def _soft_violations(problem: OcpProblem, z: np.ndarray) -> np.ndarray:
    """Smallest slack pair per stage making the soft constraints feasible."""
    cfg = problem.config
    dev = z[1:, 3] - problem.ref.delta_ref
    s_auth = np.maximum(np.maximum(dev - cfg.delta_dev_max, cfg.delta_dev_min - dev), 0.0)
    if not problem.authority_enabled:
        s_auth = np.zeros_like(s_auth)
    p_disc, _ = problem.stage_potentials(z[1:])
    s_pot = np.maximum((p_disc - problem.potential.tau).max(axis=1), 0.0)
    return np.stack([s_auth, s_pot], axis=1)


class _RowSet:
    """Rows of the condensed inequality system with provenance bookkeeping."""

    def __init__(self, n_var: int):
        self.rows: list[np.ndarray] = []
        self.rhs: list[float] = []
        self.tags: list[tuple] = []
        self.tagset: set = set()
        self.n_var = n_var

    def add(self, row: np.ndarray, rhs: float, tag: tuple) -> None:
        self.rows.append(row)
        self.rhs.append(rhs)
        self.tags.append(tag)
        self.tagset.add(tag)

    def matrices(self):
        if not self.rows:
            return np.zeros((0, self.n_var)), np.zeros(0)
        return np.vstack(self.rows), np.array(self.rhs)


def _merit(problem: OcpProblem, z, u, nu: float) -> float:
    """Exact-penalty merit with the slacks eliminated at their optimum.

    For any trajectory the cost-minimizing slack equals the soft-constraint
    violation, so the soft terms reduce to a smooth quadratic in z and the
    penalty only has to cover the shooting defects and hard state bounds.
    """
    cfg, par = problem.config, problem.params
    tail = z[1:]
    p_disc, _ = problem.stage_potentials(tail)
    dev = tail[:, 3] - problem.ref.delta_ref
    s_auth = np.maximum(np.maximum(dev - cfg.delta_dev_max, cfg.delta_dev_min - dev), 0.0)
    if not problem.authority_enabled:
        s_auth = 0.0
    s_pot = np.maximum((p_disc - problem.potential.tau).max(axis=1), 0.0) \
        if problem.packed.count else 0.0
    cost = (cfg.w_potential * p_disc.sum()
            + cfg.w_delta * np.sum((problem.ref.delta_ref - tail[:, 3]) ** 2)
            + cfg.w_v * np.sum((problem.ref.v_ref - tail[:, 4]) ** 2)
            + cfg.w_slack * (np.sum(np.square(s_auth)) + np.sum(np.square(s_pot))))
    if problem.pinned_accel is not None:
        cost += _W_PIN * np.sum((u[:, 1] - problem.pinned_accel) ** 2)
    defect = _rollout_defects(problem, z, u)
    hard = (np.maximum(tail[:, 3] - par.delta_max, 0.0).sum()
            + np.maximum(par.delta_min - tail[:, 3], 0.0).sum()
            + np.maximum(tail[:, 4] - par.v_max, 0.0).sum()
            + np.maximum(par.v_min - tail[:, 4], 0.0).sum())
    return float(cost) + nu * (np.abs(defect).sum() + hard)


def _rollout_defects(problem: OcpProblem, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    pred = rk4_step_array(z[:-1], u, problem.config.t_s, problem.params)
    return pred - z[1:]


def solve(problem: OcpProblem, warm_start: OcpSolution | None = None) -> OcpSolution:
    """SQP with Gauss-Newton curvature; returns the best iterate found.

    The returned state trajectory is the exact rollout of the returned
    inputs, so it always satisfies the dynamics and, via the linearity of
    the delta and v channels, the hard state bounds.
    """
    t_start = time.perf_counter()
    cfg = problem.config
    par = problem.params
    n = cfg.horizon

    if not _bounds_reachable(problem):
        return _failed_solution(problem, t_start)

    z, u, s = _initial_iterate(problem, warm_start)
    nu = 10.0
    status = "max_iter"
    kkt = np.inf
    lam = np.zeros((n, 5))
    mult: dict = {}
    it = 0
    best = None
    stall = 0

    for it in range(1, cfg.max_sqp_iter + 1):
        step_data = _linearize(problem, z, u)
        qp = _solve_stage_qp(problem, z, u, s, step_data)
        if qp is None:
            status = "infeasible_qp"
            break
        d_u, d_s, lam, mult, qp_obj = qp

        kkt = _kkt_residual(problem, z, u, s, step_data, lam, mult)
        step_norm = max(np.abs(d_u).max(initial=0.0), np.abs(d_s).max(initial=0.0))
        if best is None or kkt < best[0]:
            stall = 0 if (best is None or kkt < 0.9 * best[0]) else stall + 1
            best = (kkt, z, u, s, lam, mult)
        else:
            stall += 1
        if kkt < cfg.kkt_tol:
            status = "converged"
            break
        if stall >= 3:
            break

        # Recover state step from the condensed sensitivities.
        d_z = np.zeros((n + 1, 5))
        d_z[1:] = step_data.sens @ d_u.ravel() + step_data.offset
        nu = max(nu, 2.0 * np.abs(lam).max(initial=0.0))
        base = _merit(problem, z, u, nu)
        pred = max(qp_obj, 0.0) + nu * np.abs(step_data.defects).sum()
        alpha = 1.0
        accepted = False
        ls_best = None
        for _ in range(12):
            trial = (z + alpha * d_z, u + alpha * d_u)
            phi = _merit(problem, *trial, nu)
            if phi <= base - 0.05 * alpha * pred + 1e-12:
                z, u = trial
                accepted = True
                break
            if phi < base and (ls_best is None or phi < ls_best[0]):
                ls_best = (phi, trial)
            alpha *= 0.5
        if not accepted:
            if ls_best is None:
                # The step is below the merit's numerical resolution.
                status = "max_iter"
                break
            z, u = ls_best[1]
        s = _soft_violations(problem, z)
        s[s < _SLACK_SNAP] = 0.0

    if status != "infeasible_qp" and best is not None and best[0] < kkt:
        kkt, z, u, s, lam, mult = best
    u[:, 0] = np.clip(u[:, 0], par.delta_rate_min, par.delta_rate_max)
    u[:, 1] = np.clip(u[:, 1], par.a_min, par.a_max)
    states_arr = _rollout(problem.z0, u, cfg.t_s, par)
    states_arr[:, 3] = np.clip(states_arr[:, 3], par.delta_min, par.delta_max)
    states_arr[:, 4] = np.clip(states_arr[:, 4], par.v_min, par.v_max)
    s = _soft_violations(problem, states_arr)
    s[s < _SLACK_SNAP] = 0.0

    return OcpSolution(
        inputs=[ControlInput(float(a), float(b)) for a, b in u],
        states=[VehicleState.from_array(row) for row in states_arr],
        slacks=s,
        cost=problem.cost_of(states_arr, u, s),
        kkt_residual=float(kkt),
        iterations=it,
        solve_time=time.perf_counter() - t_start,
        status=status,
        z_nodes=z,
        u=u,
        lam_dyn=lam,
        mult=mult,
    )


def _failed_solution(problem: OcpProblem, t_start: float) -> OcpSolution:
    """Diagnostic solution for an infeasible OCP: full braking, no steering."""
    cfg, par = problem.config, problem.params
    n = cfg.horizon
    u = np.zeros((n, 2))
    u[:, 1] = par.a_min
    states = _rollout(problem.z0, u, cfg.t_s, par)
    states[:, 4] = np.clip(states[:, 4], par.v_min, par.v_max)
    s = _soft_violations(problem, states)
    return OcpSolution(
        inputs=[ControlInput(float(a), float(b)) for a, b in u],
        states=[VehicleState.from_array(row) for row in states],
        slacks=s, cost=problem.cost_of(states, u, s), kkt_residual=np.inf,
        iterations=0, solve_time=time.perf_counter() - t_start,
        status="infeasible_qp", z_nodes=states, u=u,
        lam_dyn=np.zeros((n, 5)), mult={},
    )


@dataclass
class _StepData:
    sens: np.ndarray      # (N, 5, 2N): d z_{k+1} / d u
    offset: np.ndarray    # (N, 5): state change at zero input step (defect flow)
    defects: np.ndarray   # (N, 5)
    A: np.ndarray         # (N, 5, 5)
    B: np.ndarray         # (N, 5, 2)
    p_disc: np.ndarray    # (N, 4)
    g_disc: np.ndarray    # (N, 4, 3)


def _linearize(problem: OcpProblem, z: np.ndarray, u: np.ndarray) -> _StepData:
    cfg = problem.config
    n = cfg.horizon
    pred, A, B = rk4_jacobians(z[:-1], u, cfg.t_s, problem.params)
    defects = pred - z[1:]
    sens = np.zeros((n, 5, 2 * n))
    offset = np.zeros((n, 5))
    sens[0, :, 0:2] = B[0]
    offset[0] = defects[0]
    for k in range(1, n):
        sens[k] = A[k] @ sens[k - 1]
        sens[k, :, 2 * k:2 * k + 2] += B[k]
        offset[k] = A[k] @ offset[k - 1] + defects[k]
    p_disc, g_disc = problem.stage_potentials(z[1:])
    return _StepData(sens, offset, defects, A, B, p_disc, g_disc)


def _stage_cost_terms(problem: OcpProblem, z: np.ndarray, sd: _StepData):
    """Node cost gradients (N, 5) and Hessians (N, 5, 5) at the iterate."""
    cfg = problem.config
    n = cfg.horizon
    tail = z[1:]
    gz = np.zeros((n, 5))
    hz = np.zeros((n, 5, 5))
    gz[:, 3] = 2.0 * cfg.w_delta * (tail[:, 3] - problem.ref.delta_ref)
    gz[:, 4] = 2.0 * cfg.w_v * (tail[:, 4] - problem.ref.v_ref)
    hz[:, 3, 3] = 2.0 * cfg.w_delta
    hz[:, 4, 4] = 2.0 * cfg.w_v
    if problem.packed.count:
        gz[:, :3] += cfg.w_potential * sd.g_disc.sum(axis=1)
        # Gauss-Newton surrogate: outer products of the per-disc gradients,
        # scaled to reproduce the positive curvature term of the field.
        rho = problem.potential.rho
        coeff = (rho + 1.0) / (rho * np.maximum(sd.p_disc, _P_FLOOR))
        outer = np.einsum("kia,kib->kiab", sd.g_disc, sd.g_disc)
        hz[:, :3, :3] += cfg.w_potential * np.einsum("kiab,ki->kab", outer, coeff)
    return gz, hz


def _solve_stage_qp(problem: OcpProblem, z, u, s, sd: _StepData, qp_tol: float | None = None):
    """Condense onto (du, ds), screen inactive rows, solve, re-add violated rows."""
    cfg, par = problem.config, problem.params
    if qp_tol is None:
        qp_tol = cfg.qp_tol
    n = cfg.horizon
    nu_var = 2 * n
    n_var = 4 * n

    gz, hz = _stage_cost_terms(problem, z, sd)
    hz_c = hz @ sd.sens                                     # (N, 5, 2N)
    h_uu = np.einsum("kij,kil->jl", sd.sens, hz_c)
    g_u = np.einsum("kij,ki->j", sd.sens, gz + np.einsum("kij,kj->ki", hz, sd.offset))
    if problem.pinned_accel is not None:
        pin_idx = np.arange(1, nu_var, 2)
        h_uu[pin_idx, pin_idx] += 2.0 * _W_PIN
        g_u[pin_idx] += 2.0 * _W_PIN * (u[:, 1] - problem.pinned_accel)

    H = np.zeros((n_var, n_var))
    H[:nu_var, :nu_var] = h_uu
    sl_idx = np.arange(nu_var, n_var)
    H[sl_idx, sl_idx] = 2.0 * cfg.w_slack
    H[np.arange(n_var), np.arange(n_var)] += cfg.qp_reg
    g = np.concatenate([g_u, 2.0 * cfg.w_slack * s.ravel()])

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    lb[0:nu_var:2] = par.delta_rate_min - u[:, 0]
    ub[0:nu_var:2] = par.delta_rate_max - u[:, 0]
    lb[1:nu_var:2] = par.a_min - u[:, 1]
    ub[1:nu_var:2] = par.a_max - u[:, 1]
    lb[nu_var:] = -s.ravel()

    delta_lin = z[1:, 3] + sd.offset[:, 3]
    v_lin = z[1:, 4] + sd.offset[:, 4]

    def build_rows(extra: set) -> _RowSet:
        rs = _RowSet(n_var)
        for k in range(n):
            row_d = np.zeros(n_var)
            row_d[:nu_var] = sd.sens[k, 3]
            row_v = np.zeros(n_var)
            row_v[:nu_var] = sd.sens[k, 4]
            if par.delta_max - delta_lin[k] < _MARGIN_DELTA or ("d_ub", k) in extra:
                rs.add(row_d, par.delta_max - delta_lin[k], ("d_ub", k))
            if delta_lin[k] - par.delta_min < _MARGIN_DELTA or ("d_lb", k) in extra:
                rs.add(-row_d, delta_lin[k] - par.delta_min, ("d_lb", k))
            if par.v_max - v_lin[k] < _MARGIN_V or ("v_ub", k) in extra:
                rs.add(row_v, par.v_max - v_lin[k], ("v_ub", k))
            if v_lin[k] - par.v_min < _MARGIN_V or ("v_lb", k) in extra:
                rs.add(-row_v, v_lin[k] - par.v_min, ("v_lb", k))
            if problem.authority_enabled:
                edev = delta_lin[k] - problem.ref.delta_ref
                r_hi = row_d.copy()
                r_hi[nu_var + 2 * k] = -1.0
                rs.add(r_hi, cfg.delta_dev_max + s[k, 0] - edev, ("a_hi", k))
                r_lo = -row_d
                r_lo[nu_var + 2 * k] = -1.0
                rs.add(r_lo, edev - cfg.delta_dev_min + s[k, 0], ("a_lo", k))
            if problem.packed.count:
                for i in range(4):
                    if sd.p_disc[k, i] > _POT_SCREEN * problem.potential.tau or ("pot", k, i) in extra:
                        row = np.zeros(n_var)
                        row[:nu_var] = sd.g_disc[k, i] @ sd.sens[k, :3]
                        row[nu_var + 2 * k + 1] = -1.0
                        rhs = (problem.potential.tau + s[k, 1] - sd.p_disc[k, i]
                               - sd.g_disc[k, i] @ sd.offset[k, :3])
                        rs.add(row, rhs, ("pot", k, i))
        return rs

    extra: set = set()
    for _ in range(3):
        rs = build_rows(extra)
        G, h = rs.matrices()
        res = solve_qp(H, g, G, h, lb, ub, max_iter=cfg.qp_max_iter, tol=qp_tol)
        if res.status == "infeasible":
            return None
        d_u = res.x[:nu_var].reshape(n, 2)
        # Verify the screened hard rows on the exact (linear) delta/v channels,
        # and the screened soft potential rows on their linearized prediction.
        d_seq = delta_lin + sd.sens[:, 3] @ res.x[:nu_var]
        v_seq = v_lin + sd.sens[:, 4] @ res.x[:nu_var]
        missing = set()
        for k in range(n):
            if d_seq[k] > par.delta_max + 1e-9 and ("d_ub", k) not in rs.tagset:
                missing.add(("d_ub", k))
            if d_seq[k] < par.delta_min - 1e-9 and ("d_lb", k) not in rs.tagset:
                missing.add(("d_lb", k))
            if v_seq[k] > par.v_max + 1e-9 and ("v_ub", k) not in rs.tagset:
                missing.add(("v_ub", k))
            if v_seq[k] < par.v_min - 1e-9 and ("v_lb", k) not in rs.tagset:
                missing.add(("v_lb", k))
        if problem.packed.count:
            d_xyp = np.einsum("kij,j->ki", sd.sens[:, :3], res.x[:nu_var]) + sd.offset[:, :3]
            p_lin = sd.p_disc + np.einsum("kia,ka->ki", sd.g_disc, d_xyp)
            s_new = s[:, 1] + res.x[nu_var + 1::2]
            over = p_lin > problem.potential.tau + s_new[:, None] + 1e-9
            for k, i in zip(*np.where(over)):
                if ("pot", int(k), int(i)) not in rs.tagset:
                    missing.add(("pot", int(k), int(i)))
        if not missing:
            break
        extra |= missing

    d_s = res.x[nu_var:].reshape(n, 2)
    mult = _collect_multipliers(rs, res, n)
    lam = _adjoint_multipliers(problem, z, sd, mult)
    _bound_multipliers(problem, z, u, s, sd, lam, mult)
    qp_obj = -float(0.5 * res.x @ H @ res.x + g @ res.x)
    return d_u, d_s, lam, mult, qp_obj


def _collect_multipliers(rs: _RowSet, res, n: int) -> dict:
    mult = {
        "d_ub": np.zeros(n), "d_lb": np.zeros(n),
        "v_ub": np.zeros(n), "v_lb": np.zeros(n),
        "a_hi": np.zeros(n), "a_lo": np.zeros(n),
        "pot": np.zeros((n, 4)),
    }
    for tag, val in zip(rs.tags, res.z_ineq):
        if tag[0] == "pot":
            mult["pot"][tag[1], tag[2]] = val
        else:
            mult[tag[0]][tag[1]] = val
    return mult


# A bound counts as active within this distance; the interior-point iterates
# approach active bounds to O(gap/multiplier) but never exactly reach them.
_ACTIVE_EPS = 1e-6


def _bound_multipliers(problem: OcpProblem, z, u, s, sd: _StepData, lam, mult) -> None:
    """Box-bound multipliers reconstructed by projecting the reduced gradients.

    Interior-point duals of weakly active bounds carry O(gap) dust that the
    heavy slack penalty would amplify; the projected multipliers form an exact
    complementary pair with the iterate and leave the true stationarity error
    visible in the KKT residual.
    """
    cfg, par = problem.config, problem.params
    r_u = np.einsum("kij,ki->kj", sd.B, lam)
    if problem.pinned_accel is not None:
        r_u[:, 1] += 2.0 * _W_PIN * (u[:, 1] - problem.pinned_accel)
    u_lo = np.array([par.delta_rate_min, par.a_min])
    u_hi = np.array([par.delta_rate_max, par.a_max])
    at_lb = u - u_lo <= _ACTIVE_EPS
    at_ub = u_hi - u <= _ACTIVE_EPS
    mult["u_lb"] = np.where(at_lb, np.maximum(r_u, 0.0), 0.0)
    mult["u_ub"] = np.where(at_ub & ~at_lb, np.maximum(-r_u, 0.0), 0.0)

    r_s = 2.0 * cfg.w_slack * s
    if problem.authority_enabled:
        r_s[:, 0] -= mult["a_hi"] + mult["a_lo"]
    r_s[:, 1] -= mult["pot"].sum(axis=1)
    mult["s_lb"] = np.where(s <= _SLACK_SNAP, np.maximum(r_s, 0.0), 0.0)


def _adjoint_multipliers(problem: OcpProblem, z, sd: _StepData, mult: dict) -> np.ndarray:
    """Dynamics multipliers by backward recursion from the stage gradients."""
    cfg = problem.config
    n = cfg.horizon
    gz, _ = _stage_cost_terms(problem, z, sd)
    contrib = gz.copy()
    contrib[:, 3] += mult["d_ub"] - mult["d_lb"]
    contrib[:, 4] += mult["v_ub"] - mult["v_lb"]
    if problem.authority_enabled:
        contrib[:, 3] += mult["a_hi"] - mult["a_lo"]
    if problem.packed.count:
        contrib[:, :3] += np.einsum("ki,kia->ka", mult["pot"], sd.g_disc)
    lam = np.zeros((n, 5))
    lam[n - 1] = contrib[n - 1]
    for k in range(n - 2, -1, -1):
        lam[k] = contrib[k] + sd.A[k + 1].T @ lam[k + 1]
    return lam


def _kkt_residual(problem: OcpProblem, z, u, s, sd: _StepData, lam, mult) -> float:
    """First-order optimality residual of the nonlinear OCP at the iterate."""
    cfg, par = problem.config, problem.params
    n = cfg.horizon

    stat_u = np.einsum("kij,ki->kj", sd.B, lam) + mult["u_ub"] - mult["u_lb"]
    if problem.pinned_accel is not None:
        stat_u[:, 1] += 2.0 * _W_PIN * (u[:, 1] - problem.pinned_accel)
    stat_s = 2.0 * cfg.w_slack * s - mult["s_lb"]
    if problem.authority_enabled:
        stat_s[:, 0] -= mult["a_hi"] + mult["a_lo"]
    stat_s[:, 1] -= mult["pot"].sum(axis=1)

    res = max(np.abs(stat_u).max(), np.abs(stat_s).max())
    res = max(res, np.abs(sd.defects).max())

    dev = z[1:, 3] - problem.ref.delta_ref
    viol = [np.maximum(z[1:, 3] - par.delta_max, 0.0), np.maximum(par.delta_min - z[1:, 3], 0.0),
            np.maximum(z[1:, 4] - par.v_max, 0.0), np.maximum(par.v_min - z[1:, 4], 0.0),
            np.maximum(-s, 0.0).ravel()]
    if problem.authority_enabled:
        viol.append(np.maximum(dev - cfg.delta_dev_max - s[:, 0], 0.0))
        viol.append(np.maximum(cfg.delta_dev_min - dev - s[:, 0], 0.0))
    if problem.packed.count:
        viol.append(np.maximum(sd.p_disc - problem.potential.tau - s[:, 1:2], 0.0).ravel())
    res = max(res, max(v.max(initial=0.0) for v in viol))

    # Complementarity over every constraint group (screened rows carry mu = 0).
    comp = [
        mult["d_ub"] * (par.delta_max - z[1:, 3]), mult["d_lb"] * (z[1:, 3] - par.delta_min),
        mult["v_ub"] * (par.v_max - z[1:, 4]), mult["v_lb"] * (z[1:, 4] - par.v_min),
        (mult["u_ub"] * (np.array([par.delta_rate_max, par.a_max]) - u)).ravel(),
        (mult["u_lb"] * (u - np.array([par.delta_rate_min, par.a_min]))).ravel(),
        (mult["s_lb"] * s).ravel(),
    ]
    if problem.authority_enabled:
        comp.append(mult["a_hi"] * (cfg.delta_dev_max + s[:, 0] - dev))
        comp.append(mult["a_lo"] * (dev - cfg.delta_dev_min + s[:, 0]))
    if problem.packed.count:
        comp.append((mult["pot"] * (problem.potential.tau + s[:, 1:2] - sd.p_disc)).ravel())
    res = max(res, max(np.abs(c).max(initial=0.0) for c in comp))
    return float(res)


class Controller:
    """Receding-horizon controller owning its warm-start memory.

    mode 'ass' is the full active safety system; 'baseline' removes the
    authority band and pins the acceleration to a proportional cruise law
    (lateral-only interventions).
    """

    def __init__(self, params: VehicleParams, discs: EgoDiscs, potential: PotentialParams,
                 config: MpcConfig, mode: str = "ass"):
        if mode not in ("ass", "baseline"):
            raise ValueError(f"unknown controller mode: {mode}")
        self.params = params
        self.discs = discs
        self.potential = potential
        self.config = config
        self.mode = mode
        self._prev: OcpSolution | None = None

    def step(self, state: VehicleState, ref: OperatorReference,
             obstacles: list[Obstacle]) -> tuple[ControlInput, OcpSolution]:
        pinned = None
        if self.mode == "baseline":
            horizon_t = self.config.horizon * self.config.t_s
            pinned = _CC_GAIN * (ref.v_ref - state.v)
            pinned = min(max(pinned, self.params.a_min), self.params.a_max)
            pinned = min(max(pinned, (self.params.v_min - state.v) / horizon_t),
                         (self.params.v_max - state.v) / horizon_t)
        problem = build_ocp(state, ref, obstacles, self.config, self.params,
                            self.discs, self.potential,
                            authority_enabled=(self.mode == "ass"),
                            pinned_accel=pinned)
        sol = solve(problem, self._prev)
        if sol.status == "infeasible_qp":
            self._prev = None
            return ControlInput(0.0, self.params.a_min), sol
        self._prev = sol
        return sol.inputs[0], sol

    def reset(self) -> None:
        self._prev = None
