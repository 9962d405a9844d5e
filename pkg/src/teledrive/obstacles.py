"""Superellipse obstacles, four-circle ego decomposition, repulsive potential field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Interior guard: the potential is singular where the superellipse value hits -1
# (deep inside an obstacle). Below -1 + EPS_INTERIOR the value saturates so the
# solver arithmetic stays finite; penetration never decreases the cost.
EPS_INTERIOR = 1e-6


@dataclass(frozen=True)
class Obstacle:
    x: float                 # center (m)
    y: float
    phi: float = 0.0         # heading (rad)
    length: float = 4.6      # along heading (m)
    breadth: float = 1.9     # across heading (m)
    speed: float = 0.0       # scalar speed along heading (m/s)
    order: int = 4           # superellipse order n, even

    def __post_init__(self) -> None:
        if self.length <= 0 or self.breadth <= 0:
            raise ValueError("obstacle dimensions must be positive")
        if self.order < 2 or self.order % 2 != 0:
            raise ValueError("superellipse order must be an even integer >= 2")
        if self.speed < 0:
            raise ValueError("obstacle speed must be >= 0 (direction is carried by phi)")

    def semi_axes(self, inflation: float) -> tuple[float, float]:
        """Inflated semi-axes (alpha_maj, beta_min) of the bounding superellipse."""
        f = 2.0 ** (1.0 / self.order)
        return f * self.length / 2.0 + inflation, f * self.breadth / 2.0 + inflation


@dataclass(frozen=True)
class EgoDiscs:
    """Four discs along the vehicle longitudinal axis covering the footprint."""

    radius: float = 1.25
    offsets: tuple[float, ...] = (-1.75, -0.55, 0.55, 1.75)  # signed from CoM (m)

    def __post_init__(self) -> None:
        if len(self.offsets) != 4:
            raise ValueError("exactly 4 ego discs are required")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ValueError("disc offsets must be strictly increasing")
        if self.radius <= 0:
            raise ValueError("disc radius must be positive")

    def covers(self, length: float, breadth: float, step: float = 0.01) -> bool:
        """Whether the disc union covers a length x breadth rectangle about the CoM.

        Checked by sampling the rectangle boundary at the given resolution;
        interior coverage follows for discs centered on the long axis.
        """
        hx, hy = length / 2.0, breadth / 2.0
        xs = np.arange(-hx, hx + step, step)
        edge_x = np.concatenate([xs, xs])
        edge_y = np.concatenate([np.full_like(xs, hy), np.full_like(xs, -hy)])
        ys = np.arange(-hy, hy + step, step)
        edge_x = np.concatenate([edge_x, np.full_like(ys, hx), np.full_like(ys, -hx)])
        edge_y = np.concatenate([edge_y, ys, ys])
        d = np.asarray(self.offsets)
        dist2 = (edge_x[:, None] - d[None, :]) ** 2 + edge_y[:, None] ** 2
        return bool(np.all(dist2.min(axis=1) <= self.radius**2 + 1e-12))


@dataclass(frozen=True)
class PotentialParams:
    tau: float = 0.1   # peak value at the inflated boundary
    rho: float = 2.0   # decay exponent

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.rho <= 0:
            raise ValueError("tau and rho must be positive")


def disc_centers(state, discs: EgoDiscs) -> np.ndarray:
    """Centers of the 4 ego discs in the inertial frame, shape (4, 2)."""
    c, s = np.cos(state.psi), np.sin(state.psi)
    d = np.asarray(discs.offsets)
    return np.stack([state.x + d * c, state.y + d * s], axis=1)


def superellipse_value(point, obstacle: Obstacle, inflation: float) -> float:
    """Implicit superellipse value: -1 at the center, 0 on the inflated boundary.

    The displacement is rotated into the obstacle frame and the components
    scaled by the inflated semi-axes before raising to the (even) order.
    """
    alpha, beta = obstacle.semi_axes(inflation)
    dx, dy = point[0] - obstacle.x, point[1] - obstacle.y
    c, s = np.cos(obstacle.phi), np.sin(obstacle.phi)
    px = c * dx + s * dy
    py = -s * dx + c * dy
    n = obstacle.order
    return float(abs(px / alpha) ** n + abs(py / beta) ** n - 1.0)


def potential_single(point, obstacle: Obstacle, params: PotentialParams, inflation: float) -> float:
    """Repulsive potential tau / (e + 1)^rho of one disc center vs one obstacle."""
    e = superellipse_value(point, obstacle, inflation)
    w = max(e + 1.0, EPS_INTERIOR)
    return params.tau / w**params.rho


@dataclass
class PackedObstacles:
    """Column arrays over obstacles for vectorized field evaluation."""

    x: np.ndarray
    y: np.ndarray
    cos_phi: np.ndarray
    sin_phi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    order: np.ndarray
    count: int = field(init=False)

    def __post_init__(self) -> None:
        self.count = len(self.x)


def pack_obstacles(obstacles: list[Obstacle], inflation: float) -> PackedObstacles:
    axes = [ob.semi_axes(inflation) for ob in obstacles]
    return PackedObstacles(
        x=np.array([ob.x for ob in obstacles]),
        y=np.array([ob.y for ob in obstacles]),
        cos_phi=np.array([np.cos(ob.phi) for ob in obstacles]),
        sin_phi=np.array([np.sin(ob.phi) for ob in obstacles]),
        alpha=np.array([a for a, _ in axes]),
        beta=np.array([b for _, b in axes]),
        order=np.array([float(ob.order) for ob in obstacles]),
    )


def disc_field(pose: np.ndarray, packed: PackedObstacles, discs: EgoDiscs,
               params: PotentialParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-disc potential and its gradient over a batch of poses.

    pose is (N, 3) rows of (x, y, psi). Returns (P, G) with P (N, 4) the
    total field per disc summed over obstacles and G (N, 4, 3) its gradient
    w.r.t. (x, y, psi). Saturated interior points contribute zero gradient.
    """
    pose = np.atleast_2d(pose)
    n_pose = pose.shape[0]
    d = np.asarray(discs.offsets)
    if packed.count == 0:
        return np.zeros((n_pose, 4)), np.zeros((n_pose, 4, 3))

    cp, sp = np.cos(pose[:, 2]), np.sin(pose[:, 2])
    # Disc centers (N, 4)
    cx = pose[:, 0:1] + d[None, :] * cp[:, None]
    cy = pose[:, 1:2] + d[None, :] * sp[:, None]

    # Obstacle-frame displacement (N, 4, M)
    rx = cx[:, :, None] - packed.x[None, None, :]
    ry = cy[:, :, None] - packed.y[None, None, :]
    co, so = packed.cos_phi[None, None, :], packed.sin_phi[None, None, :]
    px = (co * rx + so * ry) / packed.alpha[None, None, :]
    py = (-so * rx + co * ry) / packed.beta[None, None, :]

    n = packed.order[None, None, :]
    ax, ay = np.abs(px), np.abs(py)
    e = ax**n + ay**n - 1.0

    w = np.maximum(e + 1.0, EPS_INTERIOR)
    p = params.tau / w**params.rho
    # dP/de, zeroed where the interior guard saturates
    dp_de = np.where(e + 1.0 > EPS_INTERIOR, -params.rho * p / w, 0.0)

    # de/d(px, py) in the obstacle frame, then back to inertial disc coordinates
    de_dpx = n * np.sign(px) * ax ** (n - 1.0) / packed.alpha[None, None, :]
    de_dpy = n * np.sign(py) * ay ** (n - 1.0) / packed.beta[None, None, :]
    de_dcx = co * de_dpx - so * de_dpy
    de_dcy = so * de_dpx + co * de_dpy

    gx = np.sum(dp_de * de_dcx, axis=2)   # (N, 4) d/d(cx)
    gy = np.sum(dp_de * de_dcy, axis=2)

    P = np.sum(p, axis=2)
    G = np.empty((n_pose, 4, 3))
    G[:, :, 0] = gx
    G[:, :, 1] = gy
    # d(cx)/dpsi = -d sin(psi), d(cy)/dpsi = d cos(psi)
    G[:, :, 2] = gx * (-d[None, :] * sp[:, None]) + gy * (d[None, :] * cp[:, None])
    return P, G


def potential_total(state, obstacles: list[Obstacle], discs: EgoDiscs,
                    params: PotentialParams) -> float:
    """Total field: sum over obstacles and the 4 ego discs."""
    if not obstacles:
        return 0.0
    packed = pack_obstacles(obstacles, discs.radius)
    pose = np.array([[state.x, state.y, state.psi]])
    P, _ = disc_field(pose, packed, discs, params)
    return float(P.sum())


def potential_gradient(state, obstacles: list[Obstacle], discs: EgoDiscs,
                       params: PotentialParams) -> np.ndarray:
    """Analytic gradient of potential_total w.r.t. (x, y, psi)."""
    if not obstacles:
        return np.zeros(3)
    packed = pack_obstacles(obstacles, discs.radius)
    pose = np.array([[state.x, state.y, state.psi]])
    _, G = disc_field(pose, packed, discs, params)
    return G[0].sum(axis=0)


def rectangle_corners(cx: float, cy: float, phi: float, length: float, breadth: float) -> np.ndarray:
    """Corners of an oriented rectangle, shape (4, 2), counterclockwise."""
    c, s = np.cos(phi), np.sin(phi)
    hx, hy = length / 2.0, breadth / 2.0
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])
