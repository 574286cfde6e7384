"""Geometric edge-grasp affordance labels and the simulated training dataset.

A parallel-jaw gripper is a box in its own frame with axes (approach, closing,
width).  The approach axis points from the arm toward the cloth; the fingers
are two slabs of ``finger_thickness`` flanking an opening of ``opening_w``
along the closing axis.  All four criteria query node positions and the
undeformed node classes only.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .cloth import ClothMesh, ClothParams, NodeClass, make_configuration
from .imageio import DEPTH_METERS_PER_UNIT, SCHEMA_VERSION, depth_to_u16, mask_to_u8, unit_to_u16, write_json, write_pgm
from .render import Camera, DepthImage, HitMap, ReachParams, add_black_rectangles, reachability_mask, render_depth


class DatasetIOError(OSError):
    pass


def gripper_orientation(yaw_deg: float = 0.0, roll_deg: float = 0.0) -> np.ndarray:
    """Rotation whose columns are the (approach, closing, width) axes in world.

    At zero yaw and roll the gripper comes from +x (approach = -x) and closes
    along y, so a sheet lying in the x-z plane passes between the fingers.
    ``roll_deg`` turns the fingers about the approach axis; ``yaw_deg`` turns
    the whole gripper about world z.
    """
    r = np.deg2rad(roll_deg)
    approach = np.array([-1.0, 0.0, 0.0])
    closing = np.array([0.0, np.cos(r), np.sin(r)])
    width = np.cross(approach, closing)
    rot = np.column_stack([approach, closing, width])
    y = np.deg2rad(yaw_deg)
    rz = np.array([[np.cos(y), -np.sin(y), 0.0], [np.sin(y), np.cos(y), 0.0], [0.0, 0.0, 1.0]])
    return rz @ rot


@dataclass(frozen=True)
class GripperGeometry:
    opening_w: float = 0.03
    finger_len: float = 0.02
    finger_depth: float = 0.03
    finger_thickness: float = 0.01
    sweep_len: float = 0.15
    n_rays: int = 5

    def __post_init__(self):
        if min(self.opening_w, self.finger_len, self.finger_depth, self.finger_thickness) <= 0:
            raise ValueError("gripper extents must be positive")
        if self.sweep_len < 0:
            raise ValueError("sweep_len must be >= 0")


@dataclass(eq=False)
class GripperBox:
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=gripper_orientation)
    geometry: GripperGeometry = GripperGeometry()

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    def local(self, points: np.ndarray) -> np.ndarray:
        """Points in box coordinates (approach, closing, width)."""
        return (np.asarray(points) - self.center) @ self.rotation


@dataclass
class AffordanceMap:
    values: np.ndarray
    orientation: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _thresholds(params: ClothParams, geom: GripperGeometry):
    return 0.75 * params.spacing, 2.0 * params.spacing


@numba.njit(cache=True)
def _criteria_kernel(pos, uv, is_edge, centers, rots, half_len, half_open, thick, half_depth,
                     sweep, n_rays, capture_r, adjacent_d, out_edge, out_free, out_single, out_reach):
    n = pos.shape[0]
    n_ray_total = n_rays * n_rays
    ray_a = np.empty(n_ray_total)
    ray_w = np.empty(n_ray_total)
    for i in range(n_rays):
        for j in range(n_rays):
            ray_a[i * n_rays + j] = -half_len + (i + 0.5) * (2 * half_len / n_rays)
            ray_w[i * n_rays + j] = -half_depth + (j + 0.5) * (2 * half_depth / n_rays)
    captured = np.empty((n_ray_total, n), dtype=np.int64)
    counts = np.zeros(n_ray_total, dtype=np.int64)
    cap2 = capture_r * capture_r
    adj2 = adjacent_d * adjacent_d
    half_out = half_open + thick
    for p in range(centers.shape[0]):
        rot = rots[p]
        n_in = 0
        n_edge = 0
        free = True
        reach = True
        for r in range(n_ray_total):
            counts[r] = 0
        for k in range(n):
            d0 = pos[k, 0] - centers[p, 0]
            d1 = pos[k, 1] - centers[p, 1]
            d2 = pos[k, 2] - centers[p, 2]
            la = d0 * rot[0, 0] + d1 * rot[1, 0] + d2 * rot[2, 0]
            lc = d0 * rot[0, 1] + d1 * rot[1, 1] + d2 * rot[2, 1]
            lw = d0 * rot[0, 2] + d1 * rot[1, 2] + d2 * rot[2, 2]
            alc = abs(lc)
            cross = abs(lw) <= half_depth and alc <= half_out
            if cross and abs(la) <= half_len:
                n_in += 1
                if is_edge[k]:
                    n_edge += 1
                if alc > half_open:
                    free = False
            elif cross and la < -half_len and la >= -half_len - sweep:
                reach = False
            if alc <= half_open:
                for r in range(n_ray_total):
                    da = la - ray_a[r]
                    dw = lw - ray_w[r]
                    if da * da + dw * dw <= cap2:
                        captured[r, counts[r]] = k
                        counts[r] += 1
        out_edge[p] = n_edge / n_in if n_in > 0 else 0.0
        out_free[p] = free
        out_reach[p] = reach
        any_hit = False
        single = True
        for r in range(n_ray_total):
            m = counts[r]
            if m > 0:
                any_hit = True
            for x in range(m):
                a = captured[r, x]
                for y in range(x + 1, m):
                    b = captured[r, y]
                    du = uv[a, 0] - uv[b, 0]
                    dv = uv[a, 1] - uv[b, 1]
                    if du * du + dv * dv > adj2:
                        single = False
                        break
                if not single:
                    break
            if not single:
                break
        out_single[p] = single and any_hit


def evaluate_criteria(mesh: ClothMesh, centers: np.ndarray, rotations: np.ndarray, geom: GripperGeometry = GripperGeometry()):
    """All four criteria for a batch of poses.

    Returns ``(edge_percentage, collision_free, single_layer, reachable)`` arrays.
    ``rotations`` is either one 3x3 matrix shared by all poses or one per pose.
    """
    centers = np.ascontiguousarray(np.atleast_2d(centers), dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.ndim == 2:
        rotations = np.broadcast_to(rotations, (len(centers), 3, 3))
    rotations = np.ascontiguousarray(rotations)
    n = len(centers)
    edge = np.zeros(n)
    free = np.zeros(n, dtype=np.bool_)
    single = np.zeros(n, dtype=np.bool_)
    reach = np.zeros(n, dtype=np.bool_)
    capture_r, adjacent_d = _thresholds(mesh.params, geom)
    is_edge = np.ascontiguousarray(mesh.node_class != NodeClass.INTERIOR)
    _criteria_kernel(
        np.ascontiguousarray(mesh.positions), np.ascontiguousarray(mesh.undeformed), is_edge, centers, rotations,
        geom.finger_len / 2, geom.opening_w / 2, geom.finger_thickness, geom.finger_depth / 2,
        geom.sweep_len, geom.n_rays, capture_r, adjacent_d, edge, free, single, reach,
    )
    return edge, free, single, reach


def _one(mesh, g: GripperBox):
    e, f, s, r = evaluate_criteria(mesh, g.center[None], g.rotation, g.geometry)
    return float(e[0]), bool(f[0]), bool(s[0]), bool(r[0])


def edge_percentage(mesh: ClothMesh, g: GripperBox) -> float:
    """Fraction of nodes inside the gripper box classified edge or corner."""
    return _one(mesh, g)[0]


def collision_free(mesh: ClothMesh, g: GripperBox) -> bool:
    """True iff no node lies inside either finger slab."""
    return _one(mesh, g)[1]


def single_layer(mesh: ClothMesh, g: GripperBox) -> bool:
    """True iff every finger-to-finger ray captures only mutually adjacent nodes, and one ray captures something."""
    return _one(mesh, g)[2]


def reachable(mesh: ClothMesh, g: GripperBox) -> bool:
    """True iff the approach sweep in front of the box holds no node."""
    return _one(mesh, g)[3]


def combine(edge, free, single, reach):
    return edge * free * single * reach


def affordance_at(mesh: ClothMesh, g: GripperBox) -> float:
    e, f, s, r = _one(mesh, g)
    return float(combine(e, f, s, r))


def label_image(mesh: ClothMesh, cam: Camera, grasp_orientation=None, geom: GripperGeometry = GripperGeometry(),
                render=None, return_criteria: bool = False):
    """Per-pixel affordance with the gripper centered on each back-projected surface point."""
    rot = gripper_orientation() if grasp_orientation is None else np.asarray(grasp_orientation, dtype=np.float64)
    img, hit = render if render is not None else render_depth(mesh, cam)
    cloth = hit.triangle >= 0
    centers = hit.points[cloth]
    e, f, s, r = evaluate_criteria(mesh, centers, rot, geom)
    values = np.zeros(cloth.shape)
    values[cloth] = combine(e, f, s, r)
    amap = AffordanceMap(values, rot)
    if not return_criteria:
        return amap
    maps = {}
    for name, arr in zip(("edge_percentage", "collision_free", "single_layer", "reachable"), (e, f, s, r)):
        m = np.zeros(cloth.shape)
        m[cloth] = arr
        maps[name] = m
    return amap, maps


@dataclass(frozen=True)
class SimEnv:
    """Everything that defines one simulated data-collection environment."""

    cloth: ClothParams = ClothParams()
    camera: Camera = Camera()
    gripper: GripperGeometry = GripperGeometry()
    reach: ReachParams = ReachParams()
    rotation_increment_deg: float = 15.0
    occlusion_count: tuple = (0, 3)
    occlusion_size_px: tuple = (4.0, 24.0)

    def to_dict(self) -> dict:
        return {
            "cloth": self.cloth.to_dict(),
            "camera": self.camera.to_dict(),
            "gripper": {k: getattr(self.gripper, k) for k in self.gripper.__dataclass_fields__},
            "reach": {k: getattr(self.reach, k) for k in self.reach.__dataclass_fields__},
            "rotation_increment_deg": self.rotation_increment_deg,
            "occlusion_count": list(self.occlusion_count),
            "occlusion_size_px": list(self.occlusion_size_px),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimEnv":
        return cls(
            cloth=ClothParams(**d.get("cloth", {})),
            camera=Camera(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("camera", {}).items()}),
            gripper=GripperGeometry(**d.get("gripper", {})),
            reach=ReachParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("reach", {}).items()}),
            rotation_increment_deg=d.get("rotation_increment_deg", 15.0),
            occlusion_count=tuple(d.get("occlusion_count", (0, 3))),
            occlusion_size_px=tuple(d.get("occlusion_size_px", (4.0, 24.0))),
        )


@dataclass
class Scene:
    """A rendered hanging configuration with its labels."""

    mesh: ClothMesh
    depth: DepthImage
    hit: HitMap
    reach_mask: np.ndarray
    affordance: AffordanceMap
    criteria: dict


def make_scene(env: SimEnv, seed: int, rotation_deg: float, mesh: ClothMesh | None = None) -> Scene:
    if mesh is None:
        mesh = make_configuration(env.cloth, seed, rotation_deg, env.rotation_increment_deg)
    img, hit = render_depth(mesh, env.camera)
    amap, crit = label_image(mesh, env.camera, geom=env.gripper, render=(img, hit), return_criteria=True)
    hold = mesh.positions[mesh.pinned[0]]
    rmask = reachability_mask(img, hit, mesh, hold, env.reach)
    return Scene(mesh, img, hit, rmask, amap, crit)


def aug_seed(seed: int, rot_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rot_index), 7]).generate_state(1)[0])


def generate_dataset(n_seeds: int, rotation_increment_deg: float, out_dir, env: SimEnv = SimEnv(), seed_offset: int = 0,
                     progress=None) -> dict:
    """Write depth, occlusion-augmented depth, affordance and reach-mask PGMs plus a manifest.

    One entry per (seed, rotation).  On any I/O failure every file written so
    far is removed and :class:`DatasetIOError` is raised.
    """
    out = Path(out_dir)
    n_rot = int(round(360.0 / rotation_increment_deg))
    env = SimEnv(env.cloth, env.camera, env.gripper, env.reach, float(rotation_increment_deg),
                 env.occlusion_count, env.occlusion_size_px)
    written: list[Path] = []
    created_dir = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in range(seed_offset, seed_offset + n_seeds):
            for ri in range(n_rot):
                rot = ri * rotation_increment_deg
                scene = make_scene(env, s, rot)
                stem = f"s{s:04d}_r{int(round(rot)):03d}"
                a_seed = aug_seed(s, ri)
                aug = add_black_rectangles(scene.depth, a_seed, env.occlusion_count, env.occlusion_size_px)
                files = {
                    "depth": f"{stem}_depth.pgm",
                    "depth_aug": f"{stem}_depth_aug.pgm",
                    "affordance": f"{stem}_afford.pgm",
                    "reach_mask": f"{stem}_reach.pgm",
                }
                payloads = {
                    "depth": depth_to_u16(scene.depth.depth),
                    "depth_aug": depth_to_u16(aug.depth),
                    "affordance": unit_to_u16(scene.affordance.values),
                    "reach_mask": mask_to_u8(scene.reach_mask),
                }
                for key, name in files.items():
                    path = out / name
                    written.append(path)
                    write_pgm(path, payloads[key])
                entries.append({"seed": s, "rotation_deg": rot, "aug_seed": a_seed, **files})
                if progress is not None:
                    progress(len(entries))
        manifest = {
            "version": SCHEMA_VERSION,
            "kind": "affordance-dataset",
            "n_seeds": n_seeds,
            "seed_offset": seed_offset,
            "rotation_increment_deg": rotation_increment_deg,
            "depth_meters_per_unit": DEPTH_METERS_PER_UNIT,
            "affordance_scale": 65535,
            "env": env.to_dict(),
            "entries": entries,
        }
        written.append(out / "manifest.json")
        write_json(out / "manifest.json", manifest)
        return manifest
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        (out / "manifest.json.tmp").unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out, ignore_errors=True)
        raise DatasetIOError(f"dataset generation failed: {exc}") from exc
