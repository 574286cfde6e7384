"""Quasi-static mass-spring cloth hanging from pinned nodes.

Nodes are laid out row-major on a ``grid_h x grid_w`` grid.  Node ``j*grid_w + i``
has undeformed coordinates ``(i*dx, j*dy)``; the flat rest pose places the
sheet in the world x-z plane with ``v`` pointing down (world ``(u, 0, -v)``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numba
import numpy as np

from .imageio import SCHEMA_VERSION


class ClothParamError(ValueError):
    pass


class SimulationInstability(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"cloth simulation diverged at step {step}")
        self.step = step


class NodeClass(enum.IntEnum):
    INTERIOR = 0
    EDGE = 1
    CORNER = 2


@dataclass(frozen=True)
class ClothParams:
    """Cloth geometry and material.

    Stiffnesses are spring constants in N/m.  ``damping`` is the fraction of
    velocity removed per integration step.  ``edge_band_m`` and
    ``corner_band_m`` default to 1.5x the node spacing.
    """

    width_m: float = 0.3
    height_m: float = 0.3
    grid_w: int = 25
    grid_h: int = 25
    stretch_stiffness: float = 400.0
    shear_stiffness: float = 60.0
    bend_stiffness: float = 10.0
    node_mass: float = 1e-4
    damping: float = 0.004
    edge_band_m: float | None = None
    corner_band_m: float | None = None

    def __post_init__(self):
        if self.grid_w < 4 or self.grid_h < 4:
            raise ClothParamError("grid too small: grid_w and grid_h must be >= 4")
        if self.width_m <= 0 or self.height_m <= 0:
            raise ClothParamError("cloth dimensions must be positive")
        if min(self.stretch_stiffness, self.shear_stiffness, self.bend_stiffness) <= 0:
            raise ClothParamError("all stiffnesses must be > 0")
        if self.node_mass <= 0:
            raise ClothParamError("node_mass must be > 0")
        if not 0 <= self.damping < 1:
            raise ClothParamError("damping must lie in [0, 1)")
        edge = self.edge_band_m if self.edge_band_m is not None else 1.5 * self.spacing
        corner = self.corner_band_m if self.corner_band_m is not None else edge
        object.__setattr__(self, "edge_band_m", float(edge))
        object.__setattr__(self, "corner_band_m", float(corner))
        if not 0 < corner <= edge < min(self.width_m, self.height_m) / 2:
            raise ClothParamError(
                "band invariant violated: need 0 < corner_band_m <= edge_band_m < min(width, height)/2"
            )

    @property
    def dx(self) -> float:
        return self.width_m / (self.grid_w - 1)

    @property
    def dy(self) -> float:
        return self.height_m / (self.grid_h - 1)

    @property
    def spacing(self) -> float:
        return max(self.dx, self.dy)

    @property
    def n_nodes(self) -> int:
        return self.grid_w * self.grid_h

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def undeformed_grid(params: ClothParams) -> np.ndarray:
    i = np.tile(np.arange(params.grid_w), params.grid_h)
    j = np.repeat(np.arange(params.grid_h), params.grid_w)
    return np.column_stack([i * params.dx, j * params.dy])


@lru_cache(maxsize=32)
def _springs(params: ClothParams):
    gw, gh = params.grid_w, params.grid_h
    idx = np.arange(gw * gh).reshape(gh, gw)
    pairs, ks = [], []

    def add(a, b, k):
        pairs.append(np.column_stack([a.ravel(), b.ravel()]))
        ks.append(np.full(a.size, k))

    add(idx[:, :-1], idx[:, 1:], params.stretch_stiffness)
    add(idx[:-1, :], idx[1:, :], params.stretch_stiffness)
    add(idx[:-1, :-1], idx[1:, 1:], params.shear_stiffness)
    add(idx[:-1, 1:], idx[1:, :-1], params.shear_stiffness)
    add(idx[:, :-2], idx[:, 2:], params.bend_stiffness)
    add(idx[:-2, :], idx[2:, :], params.bend_stiffness)
    pairs = np.concatenate(pairs)
    k = np.concatenate(ks)
    uv = undeformed_grid(params)
    rest = np.linalg.norm(uv[pairs[:, 0]] - uv[pairs[:, 1]], axis=1)
    return pairs, rest, k


def structural_springs(params: ClothParams) -> np.ndarray:
    """Index pairs of the stretch springs (grid neighbours)."""
    pairs, _, _ = _springs(params)
    gw, gh = params.grid_w, params.grid_h
    n_struct = gh * (gw - 1) + (gh - 1) * gw
    return pairs[:n_struct]


@dataclass
class ClothMesh:
    params: ClothParams
    positions: np.ndarray
    undeformed: np.ndarray
    pinned: tuple[int, ...]
    velocities: np.ndarray = field(default=None)
    node_class: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = self.params.n_nodes
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.undeformed.setflags(write=False)
        if self.velocities is None:
            self.velocities = np.zeros((n, 3))
        if self.node_class is None:
            self.node_class = classify_all(self.params, self.undeformed)

    def copy(self) -> "ClothMesh":
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy())

    @property
    def triangles(self) -> np.ndarray:
        return grid_triangles(self.params.grid_w, self.params.grid_h)

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "params": self.params.to_dict(),
            "undeformed": self.undeformed.tolist(),
            "positions": self.positions.tolist(),
            "pins": [int(p) for p in self.pinned],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClothMesh":
        if doc.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported mesh document version {doc.get('version')}")
        params = ClothParams(**doc["params"])
        uv = undeformed_grid(params)
        if not np.allclose(uv, np.asarray(doc["undeformed"])):
            raise ValueError("undeformed coordinates do not match params")
        return cls(params, np.asarray(doc["positions"]), uv, tuple(doc["pins"]))


@lru_cache(maxsize=8)
def grid_triangles(grid_w: int, grid_h: int) -> np.ndarray:
    """Two triangles per grid cell; triangle ``2*cell`` and ``2*cell+1``."""
    idx = np.arange(grid_w * grid_h).reshape(grid_h, grid_w)
    p0 = idx[:-1, :-1].ravel()
    p1 = idx[:-1, 1:].ravel()
    p2 = idx[1:, :-1].ravel()
    p3 = idx[1:, 1:].ravel()
    tris = np.empty((p0.size * 2, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([p0, p1, p2])
    tris[1::2] = np.column_stack([p1, p3, p2])
    tris.setflags(write=False)
    return tris


def build_cloth(params: ClothParams, pin_spec) -> ClothMesh:
    """Flat rest cloth translated so the first pin sits at its world position.

    Later pins are placed at their own world positions even when that is
    incompatible with the rest geometry; settling then folds the cloth.
    """
    pin_spec = list(pin_spec)
    if not pin_spec:
        raise ClothParamError("at least one pin is required")
    uv = undeformed_grid(params)
    n = params.n_nodes
    for idx, _ in pin_spec:
        if not 0 <= idx < n:
            raise ClothParamError(f"pin index {idx} out of range [0, {n})")
    pos = np.column_stack([uv[:, 0], np.zeros(n), -uv[:, 1]])
    first, world = pin_spec[0]
    pos += np.asarray(world, dtype=np.float64) - pos[first]
    for idx, world in pin_spec[1:]:
        pos[idx] = np.asarray(world, dtype=np.float64)
    pinned = tuple(sorted({int(i) for i, _ in pin_spec}))
    return ClothMesh(params, pos, uv, pinned)


def classify_all(params: ClothParams, uv: np.ndarray) -> np.ndarray:
    du = np.minimum(uv[:, 0], params.width_m - uv[:, 0])
    dv = np.minimum(uv[:, 1], params.height_m - uv[:, 1])
    tol = 1e-12
    edge = (np.minimum(du, dv) <= params.edge_band_m + tol)
    corner = (du <= params.corner_band_m + tol) & (dv <= params.corner_band_m + tol)
    out = np.full(len(uv), NodeClass.INTERIOR, dtype=np.int8)
    out[edge] = NodeClass.EDGE
    out[corner] = NodeClass.CORNER
    out.setflags(write=False)
    return out


def classify_node(mesh: ClothMesh, node: int) -> NodeClass:
    """Class from the undeformed boundary distance only."""
    if not 0 <= node < mesh.params.n_nodes:
        raise IndexError(node)
    return NodeClass(int(mesh.node_class[node]))


def time_step(params: ClothParams) -> float:
    k_max = max(params.stretch_stiffness, params.shear_stiffness, params.bend_stiffness)
    return 0.4 * np.sqrt(params.node_mass / k_max)


@numba.njit(cache=True)
def _settle_kernel(pos, vel, free, pairs, rest, k, mass, gravity, dt, damping, max_steps, ke_eps):
    n = pos.shape[0]
    force = np.empty_like(pos)
    for step in range(max_steps):
        for a in range(n):
            force[a, 0] = 0.0
            force[a, 1] = 0.0
            force[a, 2] = mass * gravity
        for s in range(pairs.shape[0]):
            a = pairs[s, 0]
            b = pairs[s, 1]
            d0 = pos[b, 0] - pos[a, 0]
            d1 = pos[b, 1] - pos[a, 1]
            d2 = pos[b, 2] - pos[a, 2]
            length = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if length < 1e-12:
                continue
            f = k[s] * (length - rest[s]) / length
            force[a, 0] += f * d0
            force[a, 1] += f * d1
            force[a, 2] += f * d2
            force[b, 0] -= f * d0
            force[b, 1] -= f * d1
            force[b, 2] -= f * d2
        ke = 0.0
        for a in range(n):
            if not free[a]:
                continue
            for c in range(3):
                v = (vel[a, c] + dt * force[a, c] / mass) * (1.0 - damping)
                vel[a, c] = v
                pos[a, c] += dt * v
                ke += v * v
                if not np.isfinite(pos[a, c]):
                    return step, -1.0
        ke *= 0.5 * mass
        if ke < ke_eps:
            return step + 1, ke
    return max_steps, ke_eps if max_steps == 0 else ke


def settle(mesh: ClothMesh, gravity: float = -9.8, max_steps: int = 30000, ke_eps: float = 1e-8) -> ClothMesh:
    """Damped semi-implicit Euler until kinetic energy drops below ``ke_eps``.

    ``gravity`` is the z acceleration.  Returns a new mesh; the input is not
    modified.  Pinned nodes are never written.
    """
    p = mesh.params
    pairs, rest, k = _springs(p)
    out = mesh.copy()
    free = np.ones(p.n_nodes, dtype=np.bool_)
    free[list(mesh.pinned)] = False
    out.velocities[~free] = 0.0
    steps, ke = _settle_kernel(
        out.positions, out.velocities, free, pairs, rest, k, p.node_mass,
        float(gravity), time_step(p), p.damping, int(max_steps), float(ke_eps),
    )
    if ke < 0:
        raise SimulationInstability(int(steps))
    out.settle_steps = int(steps)
    return out


def mechanical_energy(mesh: ClothMesh, gravity: float = -9.8) -> float:
    """Kinetic + gravitational + spring potential energy in joules."""
    p = mesh.params
    pairs, rest, k = _springs(p)
    d = mesh.positions[pairs[:, 1]] - mesh.positions[pairs[:, 0]]
    stretch = np.linalg.norm(d, axis=1) - rest
    spring = 0.5 * np.sum(k * stretch**2)
    kinetic = 0.5 * p.node_mass * np.sum(mesh.velocities**2)
    grav = -p.node_mass * gravity * np.sum(mesh.positions[:, 2])
    return float(kinetic + grav + spring)


def max_structural_strain(mesh: ClothMesh) -> float:
    pairs = structural_springs(mesh.params)
    _, rest, _ = _springs(mesh.params)
    rest = rest[: len(pairs)]
    length = np.linalg.norm(mesh.positions[pairs[:, 1]] - mesh.positions[pairs[:, 0]], axis=1)
    return float(np.max(np.abs(length - rest) / rest))


def rotate_about_z(points: np.ndarray, pivot, angle_deg: float) -> np.ndarray:
    angle_deg = float(angle_deg) % 360.0
    if angle_deg == 0.0:
        return np.array(points, dtype=np.float64, copy=True)
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pivot = np.asarray(pivot, dtype=np.float64)
    return (np.asarray(points) - pivot) @ rot.T + pivot


def _impulse_field(params: ClothParams, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    uv = undeformed_grid(params)
    u = uv[:, 0] / params.width_m
    v = uv[:, 1] / params.height_m
    vel = np.zeros((params.n_nodes, 3))
    for axis in (0, 1):
        for _ in range(3):
            fu, fv = rng.uniform(0.5, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            vel[:, axis] += rng.normal() * np.sin(2 * np.pi * (fu * u + fv * v) + phase)
    return amplitude * vel / 3.0


@lru_cache(maxsize=256)
def _settled_configuration(params: ClothParams, seed: int) -> ClothMesh:
    rng = np.random.default_rng(seed)
    uv = undeformed_grid(params)
    near_boundary = np.flatnonzero(classify_all(params, uv) != NodeClass.INTERIOR)
    grasp = int(rng.choice(near_boundary))
    mesh = build_cloth(params, [(grasp, (0.0, 0.0, 0.0))])
    mesh.velocities[:] = _impulse_field(params, rng, amplitude=0.6)
    mesh.velocities[grasp] = 0.0
    settled = settle(mesh)
    settled.velocities[:] = 0.0
    settled.positions.setflags(write=False)
    return settled


def make_configuration(params: ClothParams, seed: int, rotation_deg: float = 0.0, increment_deg: float = 15.0) -> ClothMesh:
    """Seeded hanging configuration rotated about the vertical axis through the pin."""
    if abs(rotation_deg / increment_deg - round(rotation_deg / increment_deg)) > 1e-9:
        raise ValueError(f"rotation {rotation_deg} is not a multiple of {increment_deg} deg")
    base = _settled_configuration(params, int(seed))
    out = base.copy()
    pin = base.positions[base.pinned[0]]
    out.positions = rotate_about_z(base.positions, pin, rotation_deg)
    out.settle_steps = getattr(base, "settle_steps", 0)
    return out
