"""Teleoperation gateway: streams per-step state frames to workstation clients
over a WebSocket and feeds live steering/velocity commands into the loop."""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque

from websockets.sync.server import serve as ws_serve

from .latency import authority_cone
from .mpc import OperatorReference
from .scenario import ScenarioConfig
from .vehicle import VehicleState

log = logging.getLogger(__name__)

# Commanded v_ref ramps to zero this long after losing the operator session.
SAFETY_STOP_S = 1.0
# Outbound frames queued per client before the oldest are dropped.
SEND_QUEUE_FRAMES = 64
LOCKSTEP_TIMEOUT_S = 2.0


def _state_dict(state: VehicleState) -> dict:
    return {"x": state.x, "y": state.y, "psi": state.psi,
            "delta": state.delta, "v": state.v}


class GatewayReferenceSource:
    """Reference producer backed by live commands, with a fallback producer.

    Until a client session sends its first command, references come from the
    fallback (typically the simulated operator). After a session drops, the
    last command is held with its v_ref ramped to zero within SAFETY_STOP_S.
    """

    def __init__(self, params, fallback=None, t_s: float = 0.05):
        self.params = params
        self.fallback = fallback
        self.t_s = t_s
        self.lockstep = False
        self._lock = threading.Condition()
        self._cmd: tuple[float, float] | None = None
        self._cmd_t_client = -float("inf")
        self._session_live = False
        self._lost_at: float | None = None
        self._now = 0.0

    def submit(self, delta_ref: float, v_ref: float, t_client: float) -> None:
        p = self.params
        with self._lock:
            self._cmd = (min(max(delta_ref, p.delta_min), p.delta_max),
                         min(max(v_ref, p.v_min), p.v_max))
            self._cmd_t_client = t_client
            self._session_live = True
            self._lost_at = None
            self._lock.notify_all()

    def session_lost(self) -> None:
        with self._lock:
            if self._session_live:
                self._session_live = False
                self._lost_at = self._now

    def reference(self, displayed_state: VehicleState, t: float) -> OperatorReference:
        with self._lock:
            self._now = t
            if self.lockstep and self._session_live and self._cmd_t_client < t - self.t_s - 1e-9:
                self._lock.wait_for(
                    lambda: self._cmd_t_client >= t - self.t_s - 1e-9 or not self._session_live,
                    timeout=LOCKSTEP_TIMEOUT_S)
            cmd = self._cmd
            live = self._session_live
            lost_at = self._lost_at
        if cmd is None:
            if self.fallback is not None:
                return self.fallback.reference(displayed_state, t)
            return OperatorReference(0.0, 0.0)
        delta_ref, v_ref = cmd
        if not live and lost_at is not None:
            v_ref *= max(0.0, 1.0 - (t - lost_at) / SAFETY_STOP_S)
        return OperatorReference(delta_ref, v_ref)

    def reset(self) -> None:
        if self.fallback is not None and hasattr(self.fallback, "reset"):
            self.fallback.reset()


class TeleopGateway:
    """WebSocket endpoint /teleop publishing one StateFrame per simulation step.

    The simulation thread publishes frames without blocking: every client has
    a bounded FIFO that drops oldest frames under congestion. Commands are
    never dropped; the newest one is sampled once per step by the reference
    source. A client may request lockstep in its hello frame, pairing one
    command to every frame (used by replay tests, not by the live UI).
    """

    def __init__(self, config: ScenarioConfig, source: GatewayReferenceSource,
                 port: int = 0, pace: bool = False):
        self.config = config
        self.source = source
        self.pace = pace
        self._clients: dict = {}
        self._clients_lock = threading.Lock()
        self._seq = 0
        self._started = time.perf_counter()
        self._malformed = 0
        self._server = ws_serve(self._handle, "127.0.0.1", port)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "TeleopGateway":
        self._thread.start()
        log.info("teleop gateway listening on ws://127.0.0.1:%d/teleop", self.port)
        return self

    def stop(self) -> None:
        self._server.shutdown()

    @property
    def malformed_count(self) -> int:
        return self._malformed

    def _handle(self, conn) -> None:
        queue: deque = deque(maxlen=SEND_QUEUE_FRAMES)
        ready = threading.Event()
        stop = threading.Event()

        def sender():
            while not stop.is_set():
                if not queue:
                    ready.wait(0.05)
                    ready.clear()
                    continue
                try:
                    conn.send(queue.popleft())
                except Exception:
                    return

        tx = threading.Thread(target=sender, daemon=True)
        with self._clients_lock:
            self._clients[conn] = (queue, ready)
        tx.start()
        try:
            for raw in conn:
                try:
                    msg = json.loads(raw)
                    kind = msg.get("type")
                    if kind == "hello":
                        self.source.lockstep = bool(msg.get("lockstep", False))
                    elif kind == "command":
                        self.source.submit(float(msg["delta_ref"]), float(msg["v_ref"]),
                                           float(msg["t_client"]))
                    else:
                        self._malformed += 1
                except (ValueError, KeyError, TypeError):
                    self._malformed += 1
        finally:
            stop.set()
            ready.set()
            with self._clients_lock:
                self._clients.pop(conn, None)
                any_left = bool(self._clients)
            if not any_left:
                self.source.session_lost()

    def frame_sink(self, n: int, rec, sol, obstacles) -> None:
        """Per-step observer wired into simulation.run."""
        frame = self.build_frame(n, rec, sol, obstacles)
        data = json.dumps(frame)
        with self._clients_lock:
            clients = list(self._clients.values())
        for queue, ready in clients:
            queue.append(data)
            ready.set()
        if self.pace:
            deadline = self._started + (n + 1) * self.config.mpc.t_s
            delay = deadline - time.perf_counter()
            if delay > 0:
                time.sleep(delay)

    def build_frame(self, n: int, rec, sol, obstacles) -> dict:
        cfg = self.config
        if sol is not None:
            cone = authority_cone(rec.plant, rec.ref.delta_ref, sol, cfg.mpc, cfg.params)
            left = cone.left.tolist()
            right = cone.right.tolist()
            predicted = cone.predicted.tolist()
        else:
            left = right = predicted = []
        return {
            "type": "state",
            "schema_version": 1,
            "seq": n,
            "t": rec.t,
            "vehicle": _state_dict(rec.delayed),
            "ghost": _state_dict(rec.displayed),
            "cone": {"left": left, "right": right, "predicted": predicted},
            "obstacles": [{"x": ob.x, "y": ob.y, "phi": ob.phi,
                           "length": ob.length, "breadth": ob.breadth}
                          for ob in obstacles],
            "reference": {"delta_ref": rec.ref.delta_ref, "v_ref": rec.ref.v_ref},
            "flags": {"intervention": bool(rec.s_delta > 0 or rec.s_pot > 0),
                      "fallback": rec.status == "infeasible_qp"},
            "telemetry": {"v": rec.plant.v, "delta": rec.plant.delta,
                          "v_ref": rec.ref.v_ref, "delta_ref": rec.ref.delta_ref,
                          "solve_time_ms": rec.solve_time * 1e3},
        }
