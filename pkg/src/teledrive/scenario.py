"""Scenario files: schema validation, defaults, and bundled scenario access."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from .latency import LatencyConfig
from .mpc import MpcConfig
from .obstacles import EgoDiscs, Obstacle, PotentialParams
from .operator_model import OperatorConfig, Path, SpeedProfile
from .vehicle import VehicleParams, VehicleState


class ScenarioError(ValueError):
    """Raised when a scenario file fails validation."""


DEFAULTS = {
    "name": "unnamed",
    "mode": "ass",
    "display": "none",
    "seed": 0,
    "vehicle": {
        "l_f": 1.45, "l_r": 1.45,
        "delta_limits": [-0.6, 0.6],
        "delta_rate_limits": [-0.35, 0.35],
        "v_limits": [0.0, 10.0],
        "a_limits": [-3.0, 2.0],
    },
    "ego_discs": {"radius": 1.25, "offsets": [-1.75, -0.55, 0.55, 1.75]},
    "footprint": {"length": 4.95, "breadth": 1.96},
    "initial_state": {"x": 0.0, "y": 0.0, "psi": 0.0, "delta": 0.0, "v": 0.0},
    "obstacles": [],
    "operator": {
        "gamma1": 1.0, "gamma2": 2.0, "gamma3": 0.25,
        "lookahead": 5.0, "v_floor": 0.5,
        "speed_profile": [[0.0, 3.0]],
    },
    "potential": {"tau": 0.1, "rho": 2.0},
    "mpc": {
        "horizon": 40, "t_s": 0.05,
        "w_potential": 0.1, "w_delta": 1000.0, "w_v": 1.0, "w_slack": 1e5,
        "delta_dev": [-0.07, 0.07],
        "max_sqp_iter": 30, "kkt_tol": 5e-7, "qp_reg": 1e-6,
    },
    "latency": {"actuator_s": 0.0, "glass_s": 0.0},
}


def _schema(name: str) -> dict:
    text = resources.files("teledrive.schemas").joinpath(name).read_text()
    return json.loads(text)


def _merge_defaults(raw: dict) -> dict:
    merged = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


@dataclass
class ScenarioConfig:
    name: str
    duration_s: float
    mode: str
    display: str
    seed: int
    params: VehicleParams
    discs: EgoDiscs
    footprint_length: float
    footprint_breadth: float
    initial_state: VehicleState
    obstacles: list[Obstacle]
    operator: OperatorConfig
    path: Path
    speed_profile: SpeedProfile
    potential: PotentialParams
    mpc: MpcConfig
    latency: LatencyConfig
    resolved: dict  # the fully merged raw document, for reproducibility logs

    @property
    def steps(self) -> int:
        return round(self.duration_s / self.mpc.t_s)


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    """Validate a raw scenario document and build the typed configuration."""
    merged = _merge_defaults(raw)
    try:
        jsonschema.validate(merged, _schema("scenario.schema.json"))
    except jsonschema.ValidationError as err:
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ScenarioError(f"scenario field '{path}': {err.message}") from err

    veh = merged["vehicle"]
    params = VehicleParams(
        l_f=veh["l_f"], l_r=veh["l_r"],
        delta_min=veh["delta_limits"][0], delta_max=veh["delta_limits"][1],
        delta_rate_min=veh["delta_rate_limits"][0], delta_rate_max=veh["delta_rate_limits"][1],
        v_min=veh["v_limits"][0], v_max=veh["v_limits"][1],
        a_min=veh["a_limits"][0], a_max=veh["a_limits"][1],
    )
    mpc_raw = merged["mpc"]
    mpc = MpcConfig(
        horizon=mpc_raw["horizon"], t_s=mpc_raw["t_s"],
        w_potential=mpc_raw["w_potential"], w_delta=mpc_raw["w_delta"],
        w_v=mpc_raw["w_v"], w_slack=mpc_raw["w_slack"],
        delta_dev_min=mpc_raw["delta_dev"][0], delta_dev_max=mpc_raw["delta_dev"][1],
        max_sqp_iter=mpc_raw["max_sqp_iter"], kkt_tol=mpc_raw["kkt_tol"],
        qp_reg=mpc_raw["qp_reg"],
    )
    op = merged["operator"]
    latency = LatencyConfig(**merged["latency"])
    try:
        latency.steps(mpc.t_s)
    except ValueError as err:
        raise ScenarioError(str(err)) from err
    if latency.round_trip_s > mpc.horizon * mpc.t_s and merged["display"] == "mpc":
        raise ScenarioError("round-trip latency exceeds the prediction horizon")

    init = merged["initial_state"]
    try:
        config = ScenarioConfig(
            name=merged["name"],
            duration_s=merged["duration_s"],
            mode=merged["mode"],
            display=merged["display"],
            seed=merged["seed"],
            params=params,
            discs=EgoDiscs(radius=merged["ego_discs"]["radius"],
                           offsets=tuple(merged["ego_discs"]["offsets"])),
            footprint_length=merged["footprint"]["length"],
            footprint_breadth=merged["footprint"]["breadth"],
            initial_state=VehicleState(**init),
            obstacles=[Obstacle(**ob) for ob in merged["obstacles"]],
            operator=OperatorConfig(
                gamma1=op["gamma1"], gamma2=op["gamma2"], gamma3=op["gamma3"],
                lookahead=op["lookahead"], v_floor=op["v_floor"],
            ),
            path=Path(op["path"]),
            speed_profile=SpeedProfile(op["speed_profile"]),
            potential=PotentialParams(**merged["potential"]),
            mpc=mpc,
            latency=latency,
            resolved=merged,
        )
    except ValueError as err:
        raise ScenarioError(str(err)) from err
    return config


def load_scenario(file) -> ScenarioConfig:
    """Load and validate a scenario JSON file (path or file object)."""
    if hasattr(file, "read"):
        raw = json.load(file)
    else:
        with open(file) as fh:
            raw = json.load(fh)
    return scenario_from_dict(raw)


def bundled_scenario(name: str) -> ScenarioConfig:
    """Load one of the scenarios shipped with the package."""
    text = resources.files("teledrive.scenarios").joinpath(f"{name}.json").read_text()
    return scenario_from_dict(json.loads(text))


def validate_metrics(doc: dict) -> None:
    jsonschema.validate(doc, _schema("metrics.schema.json"))


def random_field_scenario(seed: int, n_obstacles: int = 3, duration_s: float = 8.0,
                          mode: str = "ass") -> ScenarioConfig:
    """Randomized static-field scenario for sweep-style checks.

    A gently curving path through a field of static boxes placed off the
    path corridor, derived deterministically from the seed.
    """
    rng = np.random.RandomState(seed)
    xs = np.linspace(0.0, 60.0, 13)
    amp = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2 * np.pi)
    ys = amp * np.sin(xs / 18.0 * 2 * np.pi + phase)
    path = [[float(x), float(y)] for x, y in zip(xs, ys)]
    obstacles = []
    for i in range(n_obstacles):
        x = float(rng.uniform(14.0, 50.0))
        y_path = amp * np.sin(x / 18.0 * 2 * np.pi + phase)
        side = 1.0 if rng.rand() < 0.5 else -1.0
        y = float(y_path + side * rng.uniform(3.4, 5.0))
        obstacles.append({
            "x": x, "y": y, "phi": float(rng.uniform(-0.4, 0.4)),
            "length": float(rng.uniform(3.0, 5.0)),
            "breadth": float(rng.uniform(1.4, 2.0)),
            "speed": 0.0, "order": 4,
        })
    raw = {
        "schema_version": 1,
        "name": f"random-field-{seed}",
        "duration_s": duration_s,
        "mode": mode,
        "seed": seed,
        "initial_state": {"x": 0.0, "y": float(ys[0]), "psi": 0.0, "delta": 0.0, "v": 3.0},
        "obstacles": obstacles,
        "operator": {"path": path},
    }
    return scenario_from_dict(raw)
