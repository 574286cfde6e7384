"""Ray-cast depth images, cloth masks, reachability masks and occlusion augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .cloth import ClothMesh
from .imageio import DEPTH_METERS_PER_UNIT, SCHEMA_VERSION, depth_to_u16, mask_to_u8, write_json, write_pgm


@dataclass(frozen=True)
class Camera:
    position: tuple = (0.0, -0.9, -0.2)
    look_at: tuple = (0.0, 0.0, -0.2)
    up: tuple = (0.0, 0.0, 1.0)
    hfov_deg: float = 28.0
    width: int = 128
    height: int = 128
    near: float = 0.05
    far: float = 3.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16 pixels")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    def basis(self):
        """Rows are camera right, up and forward in world coordinates."""
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    @property
    def focal_px(self) -> float:
        return 0.5 * self.width / np.tan(np.deg2rad(self.hfov_deg) / 2)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.asarray(self.position)) @ self.basis().T

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous (col, row) pixel coordinates; pixel centers at +0.5."""
        pc = self.to_camera(points)
        f = self.focal_px
        col = f * pc[..., 0] / pc[..., 2] + 0.5 * self.width
        row = -f * pc[..., 1] / pc[..., 2] + 0.5 * self.height
        return np.stack([col, row], axis=-1)

    def pixel_ray(self, row: float, col: float) -> np.ndarray:
        """Unit world direction through the center of pixel (row, col)."""
        f = self.focal_px
        d_cam = np.array([(col + 0.5 - 0.5 * self.width) / f, -(row + 0.5 - 0.5 * self.height) / f, 1.0])
        d = d_cam @ self.basis()
        return d / np.linalg.norm(d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class DepthImage:
    """Depth in meters along the camera axis; 0 marks masked or invalid pixels."""

    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def cloth_mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class HitMap:
    """Per-pixel triangle id (-1 for no hit) and barycentric weights of the nearest hit."""

    triangle: np.ndarray
    bary: np.ndarray
    points: np.ndarray = field(default=None, repr=False)

    def hit_point(self, mesh: ClothMesh, row: int, col: int) -> np.ndarray:
        tri = self.triangle[row, col]
        if tri < 0:
            raise ValueError(f"pixel ({row}, {col}) has no cloth hit")
        verts = mesh.positions[mesh.triangles[tri]]
        return self.bary[row, col] @ verts


@numba.njit(cache=True)
def _raycast(verts_cam, tris, focal, width, height, near, far, depth, tri_id, bary):
    cx = 0.5 * width
    cy = 0.5 * height
    for t in range(tris.shape[0]):
        a = verts_cam[tris[t, 0]]
        b = verts_cam[tris[t, 1]]
        c = verts_cam[tris[t, 2]]
        if a[2] <= near and b[2] <= near and c[2] <= near:
            continue
        if a[2] > 1e-9 and b[2] > 1e-9 and c[2] > 1e-9:
            cmin = 1e18
            cmax = -1e18
            rmin = 1e18
            rmax = -1e18
            for v in (a, b, c):
                px = focal * v[0] / v[2] + cx
                py = -focal * v[1] / v[2] + cy
                cmin = min(cmin, px)
                cmax = max(cmax, px)
                rmin = min(rmin, py)
                rmax = max(rmax, py)
            c0 = max(0, int(np.floor(cmin - 0.5)))
            c1 = min(width - 1, int(np.ceil(cmax - 0.5)))
            r0 = max(0, int(np.floor(rmin - 0.5)))
            r1 = min(height - 1, int(np.ceil(rmax - 0.5)))
        else:
            c0, c1, r0, r1 = 0, width - 1, 0, height - 1
        e1x = b[0] - a[0]
        e1y = b[1] - a[1]
        e1z = b[2] - a[2]
        e2x = c[0] - a[0]
        e2y = c[1] - a[1]
        e2z = c[2] - a[2]
        for r in range(r0, r1 + 1):
            dy = -(r + 0.5 - cy) / focal
            for col in range(c0, c1 + 1):
                dx = (col + 0.5 - cx) / focal
                # Moller-Trumbore with unnormalized direction (dx, dy, 1): t is z-depth.
                px = dy * e2z - e2y
                py = e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < 1e-14:
                    continue
                inv = 1.0 / det
                tx = -a[0]
                ty = -a[1]
                tz = -a[2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                z = (e2x * qx + e2y * qy + e2z * qz) * inv
                if z <= near or z >= far:
                    continue
                if depth[r, col] == 0.0 or z < depth[r, col]:
                    depth[r, col] = z
                    tri_id[r, col] = t
                    bary[r, col, 0] = 1.0 - u - v
                    bary[r, col, 1] = u
                    bary[r, col, 2] = v


def render_depth(mesh: ClothMesh, cam: Camera) -> tuple[DepthImage, HitMap]:
    """Nearest-hit ray cast of the cloth triangles; non-cloth pixels are 0."""
    verts_cam = np.ascontiguousarray(cam.to_camera(mesh.positions))
    depth = np.zeros((cam.height, cam.width))
    tri_id = np.full((cam.height, cam.width), -1, dtype=np.int64)
    bary = np.zeros((cam.height, cam.width, 3))
    _raycast(verts_cam, mesh.triangles, cam.focal_px, cam.width, cam.height, cam.near, cam.far, depth, tri_id, bary)
    hit = tri_id >= 0
    points = np.zeros((cam.height, cam.width, 3))
    tv = mesh.positions[mesh.triangles[tri_id[hit]]]
    points[hit] = np.einsum("nk,nkd->nd", bary[hit], tv)
    return DepthImage(depth), HitMap(tri_id, bary, points)


def add_black_rectangles(img: DepthImage, rng_seed, count_range=(0, 3), size_range=(4.0, 24.0)) -> DepthImage:
    """Zero the pixels covered by a seeded random number of rotated rectangles."""
    rng = np.random.default_rng(rng_seed)
    out = img.depth.copy()
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    rows, cols = np.mgrid[0 : img.height, 0 : img.width] + 0.5
    for _ in range(count):
        cc = rng.uniform(0, img.width)
        cr = rng.uniform(0, img.height)
        w, h = rng.uniform(size_range[0], size_range[1], size=2)
        ang = rng.uniform(0, np.pi)
        ca, sa = np.cos(ang), np.sin(ang)
        du = (cols - cc) * ca + (rows - cr) * sa
        dv = -(cols - cc) * sa + (rows - cr) * ca
        out[(np.abs(du) <= w / 2) & (np.abs(dv) <= h / 2)] = 0.0
    return DepthImage(out)


@dataclass(frozen=True)
class ReachParams:
    clearance_m: float = 0.04
    bottom_fraction: float = 0.2
    approach_dir: tuple = (1.0, 0.0, 0.0)


def reachability_mask(img: DepthImage, hit_map: HitMap, mesh: ClothMesh, holding_gripper_pos, params: ReachParams = ReachParams()) -> np.ndarray:
    """Cloth pixels a second gripper approaching along ``approach_dir`` may target.

    Keeps pixels whose surface point is (a) at least ``clearance_m`` from the
    holding gripper, (b) on the approach-side half of the cloth bounding box and
    (c) above the bottom ``bottom_fraction`` of the cloth's vertical extent.
    """
    cloth = (img.depth > 0) & (hit_map.triangle >= 0)
    pts = hit_map.points
    hold = np.asarray(holding_gripper_pos, dtype=np.float64)
    far_enough = np.linalg.norm(pts - hold, axis=-1) >= params.clearance_m
    approach = np.asarray(params.approach_dir, dtype=np.float64)
    proj_nodes = mesh.positions @ approach
    mid = 0.5 * (proj_nodes.min() + proj_nodes.max())
    approach_side = pts @ approach >= mid
    z = mesh.positions[:, 2]
    z_cut = z.min() + params.bottom_fraction * (z.max() - z.min())
    above_bottom = pts[..., 2] > z_cut
    return cloth & far_enough & approach_side & above_bottom


def save_depth(path, img: DepthImage, sidecar: bool = True) -> None:
    write_pgm(path, depth_to_u16(img.depth))
    if sidecar:
        write_json(str(path) + ".json", {"version": SCHEMA_VERSION, "meters_per_unit": DEPTH_METERS_PER_UNIT})


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, mask_to_u8(mask))
