"""Synthetic tactile frames, edge pose estimation and grasp classification.

Sensor coordinates are millimeters with x along the 32 columns (30 mm) and y
along the 24 rows (22.5 mm).  Row 0 is the inner edge of the finger and the
last row is the fingertip.  Frames store gel indentation depth in mm.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import SCHEMA_VERSION, read_json, read_pgm, write_json, write_pgm

SENSOR_W_MM = 30.0
SENSOR_H_MM = 22.5
FRAME_COLS = 32
FRAME_ROWS = 24
PX_MM = SENSOR_W_MM / FRAME_COLS
FRAME_MM_PER_UNIT = 1e-4

GEL_AMPLITUDE_MM = 0.25
GEL_SIGMA_MM = 9.0
IMPRINT_MAX_MM = 1.0
IMPRINT_GAIN_PER_MM = 1.1
SENSOR_NOISE_MM = 0.01
TEXTURE_NOISE = 0.15
IMPRINT_BLUR_PX = 0.6

COVERAGE_LO = 0.05
COVERAGE_HI = 0.95
ONSET_THRESHOLD_MM = 0.03
MARKER_COLS = 8
MARKER_ROWS = 6


class Category(str, enum.Enum):
    EDGE = "edge"
    CORNER = "corner"
    FOLD = "fold"
    ALL_FABRIC = "all_fabric"
    NO_FABRIC = "no_fabric"


CATEGORIES = [Category.EDGE, Category.CORNER, Category.FOLD, Category.ALL_FABRIC, Category.NO_FABRIC]


class PoseClass(str, enum.Enum):
    NO_FABRIC = "no_fabric"
    ALL_FABRIC = "all_fabric"
    EDGE = "edge"


def _pixel_xy():
    x = (np.arange(FRAME_COLS) + 0.5) * PX_MM
    y = (np.arange(FRAME_ROWS) + 0.5) * PX_MM
    return np.meshgrid(x, y)


_X, _Y = _pixel_xy()
GEL_CENTER = ((FRAME_COLS // 2 + 0.5) * PX_MM, (FRAME_ROWS // 2 + 0.5) * PX_MM)
BASELINE = GEL_AMPLITUDE_MM * np.exp(-((_X - GEL_CENTER[0]) ** 2 + (_Y - GEL_CENTER[1]) ** 2) / (2 * GEL_SIGMA_MM**2))
BASELINE.setflags(write=False)


def normalize_angle_deg(theta: float) -> float:
    """Map a line orientation to (-90, 90]."""
    t = (theta + 90.0) % 180.0 - 90.0
    return 90.0 if t == -90.0 else t


@dataclass
class TactileFrame:
    depth: np.ndarray
    markers: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != (FRAME_ROWS, FRAME_COLS):
            raise ValueError(f"tactile frame must be {FRAME_ROWS}x{FRAME_COLS}")

    @property
    def residual(self) -> np.ndarray:
        return self.depth - BASELINE


@dataclass(frozen=True)
class EdgePose:
    cls: PoseClass
    cx_mm: float = float("nan")
    cy_mm: float = float("nan")
    theta_deg: float = float("nan")
    coverage: float = float("nan")
    flagged: bool = False


def chord_midpoint(point, theta_deg: float):
    """Midpoint of the part of the line through ``point`` inside the sensor rectangle.

    Returns None when the line misses the sensor.
    """
    px, py = point
    t = np.deg2rad(theta_deg)
    dx, dy = np.cos(t), np.sin(t)
    lo, hi = -np.inf, np.inf
    for p, d, lim in ((px, dx, SENSOR_W_MM), (py, dy, SENSOR_H_MM)):
        if abs(d) < 1e-12:
            if not 0.0 <= p <= lim:
                return None
            continue
        a, b = (0.0 - p) / d, (lim - p) / d
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if hi <= lo:
        return None
    s = 0.5 * (lo + hi)
    return px + s * dx, py + s * dy


def _half_plane_weight(point, theta_deg: float, wave_mm: float = 0.0, wave_phase: float = 0.0) -> np.ndarray:
    """Anti-aliased fraction of each pixel on the fabric side (+normal) of the line.

    ``wave_mm`` adds a sinusoidal fray of that amplitude (period 12 mm) along the line.
    """
    t = np.deg2rad(theta_deg)
    nx, ny = -np.sin(t), np.cos(t)
    signed = (_X - point[0]) * nx + (_Y - point[1]) * ny
    if wave_mm:
        along = (_X - point[0]) * ny - (_Y - point[1]) * nx
        signed = signed + wave_mm * np.sin(2 * np.pi * along / 12.0 + wave_phase)
    return np.clip(0.5 + signed / PX_MM, 0.0, 1.0)


@dataclass(frozen=True)
class GraspScenario:
    """A gripped cloth region.

    For edge and fold the fabric covers the half-plane on the +normal side
    of the line through ``edge_point`` at ``edge_angle_deg``.  A corner is the
    intersection of that half-plane with the one of the perpendicular line
    through the same point, rotated by ``corner_turn`` (+90 or -90 deg).
    ``contact_offset`` is the closure at which the fingers first touch fabric.
    """

    category: Category
    edge_point: tuple = (15.0, 11.25)
    edge_angle_deg: float = 0.0
    layers: int = 1
    thickness_mm: float = 0.75
    seed: int = 0
    contact_offset: float = 0.0
    corner_turn: float = 90.0
    noise: float = 1.0
    wave_mm: float = 0.0

    def __post_init__(self):
        cat = Category(self.category)
        object.__setattr__(self, "category", cat)
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        if self.layers == 2 and cat != Category.FOLD:
            raise ValueError("only folds have two layers")
        if cat == Category.FOLD and self.layers != 2:
            object.__setattr__(self, "layers", 2)
        if self.thickness_mm <= 0:
            raise ValueError("thickness must be positive")
        if not 0 <= self.contact_offset < 1:
            raise ValueError("contact_offset must lie in [0, 1)")

    def coverage_weight(self) -> np.ndarray:
        cat = self.category
        if cat == Category.NO_FABRIC:
            return np.zeros((FRAME_ROWS, FRAME_COLS))
        if cat == Category.ALL_FABRIC:
            return np.ones((FRAME_ROWS, FRAME_COLS))
        phase = (self.seed % 1000) * 0.001 * 2 * np.pi
        w = _half_plane_weight(self.edge_point, self.edge_angle_deg, self.wave_mm, phase)
        if cat == Category.CORNER:
            w = w * _half_plane_weight(self.edge_point, self.edge_angle_deg + self.corner_turn, self.wave_mm, phase)
        return w

    def pose(self) -> EdgePose:
        """Ground-truth pose label of the fully closed frame."""
        w = self.coverage_weight()
        cov = float(w.mean())
        if self.category in (Category.EDGE, Category.FOLD):
            mid = chord_midpoint(self.edge_point, self.edge_angle_deg)
            if mid is not None and COVERAGE_LO <= cov <= COVERAGE_HI:
                return EdgePose(PoseClass.EDGE, mid[0], mid[1], normalize_angle_deg(self.edge_angle_deg), cov)
        if cov < 0.5:
            return EdgePose(PoseClass.NO_FABRIC, coverage=cov)
        return EdgePose(PoseClass.ALL_FABRIC, coverage=cov)

    @classmethod
    def random(cls, category, rng: np.random.Generator, **overrides) -> "GraspScenario":
        cat = Category(category)
        kw = dict(
            category=cat,
            seed=int(rng.integers(2**31)),
            thickness_mm=float(rng.uniform(0.55, 1.05)),
            contact_offset=float(rng.uniform(0.0, 0.35)),
            wave_mm=float(rng.uniform(0.0, 0.4)),
        )
        if cat in (Category.EDGE, Category.FOLD):
            kw["edge_angle_deg"] = float(rng.uniform(-35, 35))
            kw["edge_point"] = (float(rng.uniform(11, 19)), float(rng.uniform(4.5, 18.0)))
        elif cat == Category.CORNER:
            kw["edge_angle_deg"] = float(rng.uniform(-35, 35))
            kw["edge_point"] = (float(rng.uniform(9, 21)), float(rng.uniform(7.0, 15.5)))
            kw["corner_turn"] = float(rng.choice([90.0, -90.0]))
        if cat == Category.FOLD:
            kw["layers"] = 2
        kw.update(overrides)
        return cls(**kw)


def imprint_height(scn: GraspScenario, closure: float) -> float:
    """Peak fabric imprint (mm): linear in closure x layers x thickness, then saturating."""
    if scn.category == Category.NO_FABRIC:
        return 0.0
    eff = max(0.0, (closure - scn.contact_offset) / (1.0 - scn.contact_offset))
    return min(IMPRINT_MAX_MM, IMPRINT_GAIN_PER_MM * scn.layers * scn.thickness_mm * eff)


@lru_cache(maxsize=4096)
def _texture(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    texture = ndimage.gaussian_filter(rng.normal(size=(FRAME_ROWS, FRAME_COLS)), 0.7)
    texture /= texture.std() + 1e-12
    texture.setflags(write=False)
    return texture


@lru_cache(maxsize=4096)
def _blurred_weight(scn: GraspScenario) -> np.ndarray:
    w = ndimage.gaussian_filter(scn.coverage_weight(), IMPRINT_BLUR_PX, mode="nearest")
    w.setflags(write=False)
    return w


def _sensor_noise(seed: int, frame_index: int) -> np.ndarray:
    return np.random.default_rng([seed, frame_index, 1]).normal(size=(FRAME_ROWS, FRAME_COLS))


def synth_frame(scn: GraspScenario, grip_closure: float, frame_index: int = 0) -> TactileFrame:
    """Gel baseline plus fabric imprint plus seeded texture and sensor noise.

    The texture pattern is fixed per scenario; sensor noise is drawn per
    ``frame_index``.
    """
    if not 0.0 <= grip_closure <= 1.0:
        raise ValueError("grip_closure must lie in [0, 1]")
    h = imprint_height(scn, grip_closure)
    w = _blurred_weight(scn)
    depth = BASELINE.copy()
    if scn.noise > 0:
        texture = _texture(scn.seed)
        sensor = _sensor_noise(scn.seed, frame_index)
        depth += h * w * (1.0 + scn.noise * TEXTURE_NOISE * texture) + scn.noise * SENSOR_NOISE_MM * sensor
    else:
        depth += h * w
    return TactileFrame(np.maximum(depth, 0.0))


def synth_sequence(scn: GraspScenario, n_frames: int = 30) -> list[TactileFrame]:
    """Frames at linearly increasing closure from 0 to 1."""
    if n_frames < 25:
        raise ValueError("a grasp sequence needs at least 25 frames")
    return [synth_frame(scn, i / (n_frames - 1), i) for i in range(n_frames)]


def mean_imprint(frame: TactileFrame) -> float:
    return float(frame.residual.mean())


def onset_index(frames) -> int | None:
    for i, f in enumerate(frames):
        if mean_imprint(f) > ONSET_THRESHOLD_MM:
            return i
    return None


def sample_indices(n_frames: int, shift: int = 0, count: int = 5, interval: int = 5) -> list[int]:
    """Last ``count`` frames at ``interval`` spacing, ending ``shift`` frames before the end."""
    last = n_frames - 1 - shift
    idx = [last - interval * k for k in range(count - 1, -1, -1)]
    if idx[0] < 0:
        raise ValueError("sequence too short for the requested sampling")
    return idx


# -- augmentation -------------------------------------------------------------

def _rigid(points, angle_deg, shift):
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    px = np.asarray(points[0]) - SENSOR_W_MM / 2
    py = np.asarray(points[1]) - SENSOR_H_MM / 2
    return (c * px - s * py + SENSOR_W_MM / 2 + shift[0], s * px + c * py + SENSOR_H_MM / 2 + shift[1])


def warp_residual(residual: np.ndarray, angle_deg: float, shift) -> np.ndarray:
    """Move image content by the rigid motion (rotation about the sensor center, then shift in mm)."""
    if angle_deg == 0 and shift[0] == 0 and shift[1] == 0:
        return residual.copy()
    # Inverse-map output pixel centers into the source image.
    a = -np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    qx = _X - shift[0] - SENSOR_W_MM / 2
    qy = _Y - shift[1] - SENSOR_H_MM / 2
    sx = c * qx - s * qy + SENSOR_W_MM / 2
    sy = s * qx + c * qy + SENSOR_H_MM / 2
    coords = np.stack([sy / PX_MM - 0.5, sx / PX_MM - 0.5])
    return ndimage.map_coordinates(residual, coords, order=1, mode="nearest")


@dataclass(frozen=True)
class AugmentParams:
    max_shift_mm: float = 2.0
    max_angle_deg: float = 10.0
    clip_lo: float = 0.6
    no_fabric_scale: float = 0.1
    clip_depth: bool = True


def transform_pose(pose: EdgePose, angle_deg: float, shift) -> EdgePose:
    if pose.cls != PoseClass.EDGE:
        return pose
    nx, ny = _rigid((pose.cx_mm, pose.cy_mm), angle_deg, shift)
    theta = pose.theta_deg + angle_deg
    mid = chord_midpoint((nx, ny), theta)
    if mid is None:
        return EdgePose(PoseClass.NO_FABRIC, flagged=True)
    return EdgePose(PoseClass.EDGE, float(mid[0]), float(mid[1]), normalize_angle_deg(theta), pose.coverage)


def augment(frame: TactileFrame, pose: EdgePose, rng: np.random.Generator, params: AugmentParams = AugmentParams()):
    """Random max-depth clip, then a random rigid motion of the fabric imprint.

    The gel baseline does not move.  The pose label follows the same motion;
    its class is re-derived from the moved label line where needed.
    """
    scale = params.no_fabric_scale if pose.cls == PoseClass.NO_FABRIC else 1.0
    angle = float(rng.uniform(-1, 1)) * params.max_angle_deg * scale
    shift = rng.uniform(-1, 1, size=2) * params.max_shift_mm * scale
    clip_frac = float(rng.uniform(params.clip_lo, 1.0))
    depth = frame.depth
    if params.clip_depth:
        depth = np.minimum(depth, clip_frac * depth.max() + (1 - clip_frac) * BASELINE.max())
        depth = np.maximum(depth, np.minimum(frame.depth, BASELINE))
    res = warp_residual(depth - BASELINE, angle, shift)
    out = TactileFrame(np.maximum(BASELINE + res, 0.0), frame.markers)
    new_pose = transform_pose(pose, angle, shift)
    if new_pose.cls == PoseClass.EDGE:
        cov = _label_coverage(new_pose)
        if not COVERAGE_LO <= cov <= COVERAGE_HI:
            new_pose = EdgePose(PoseClass.NO_FABRIC if cov < 0.5 else PoseClass.ALL_FABRIC, coverage=cov)
        else:
            new_pose = replace(new_pose, coverage=cov)
    return out, new_pose


def _label_coverage(pose: EdgePose) -> float:
    # Fabric lies on the tip side (+normal) by the labeling convention.
    return float(_half_plane_weight((pose.cx_mm, pose.cy_mm), pose.theta_deg).mean())


def augment_with(frame: TactileFrame, angle_deg: float, shift) -> TactileFrame:
    res = warp_residual(frame.residual, angle_deg, shift)
    return TactileFrame(np.maximum(BASELINE + res, 0.0), frame.markers)


# -- pose estimation ------------------------------------------------------------

def _boundary_points(res: np.ndarray, level: float) -> np.ndarray:
    pts = []
    above = res > level
    # horizontal neighbours
    diff = above[:, 1:] != above[:, :-1]
    r, c = np.nonzero(diff)
    if r.size:
        a, b = res[r, c], res[r, c + 1]
        t = (level - a) / (b - a)
        pts.append(np.column_stack([(c + 0.5 + t) * PX_MM, (r + 0.5) * PX_MM]))
    diff = above[1:, :] != above[:-1, :]
    r, c = np.nonzero(diff)
    if r.size:
        a, b = res[r, c], res[r + 1, c]
        t = (level - a) / (b - a)
        pts.append(np.column_stack([(c + 0.5) * PX_MM, (r + 0.5 + t) * PX_MM]))
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def tls_line(points: np.ndarray):
    """Total-least-squares line: (centroid, direction angle in deg, RMS orthogonal residual)."""
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    d = vt[0]
    rms = s[1] / np.sqrt(len(points)) if len(s) > 1 else 0.0
    return centroid, float(np.degrees(np.arctan2(d[1], d[0]))), float(rms)


def _trimmed_refit(points: np.ndarray, centroid, theta_deg: float, k: float = 3.0):
    """Refit without points far off the first line (bent boundary stretches near the frame border).

    ``k`` scales the median absolute orthogonal distance; the floor of a
    quarter pixel keeps clean straight boundaries untouched.
    """
    t = np.deg2rad(theta_deg)
    normal = np.array([-np.sin(t), np.cos(t)])
    dist = np.abs((points - centroid) @ normal)
    keep = dist <= max(k * np.median(dist), 0.25 * PX_MM)
    if keep.sum() < 3 or keep.all():
        return centroid, theta_deg
    c, th, _ = tls_line(points[keep])
    return c, th


@dataclass
class FrameFeatures:
    coverage: float
    imprint: float
    residual: float
    n_boundary: int
    pose: EdgePose


def analyze_frame(frame: TactileFrame) -> FrameFeatures:
    res = ndimage.gaussian_filter(frame.residual, 1.0, mode="nearest")
    noise_level = 3.0 * SENSOR_NOISE_MM
    contact = res > noise_level
    if contact.sum() < 3:
        return FrameFeatures(0.0, 0.0, 0.0, 0, EdgePose(PoseClass.NO_FABRIC, coverage=0.0))
    height = float(np.percentile(res[contact], 75))
    level = max(0.5 * height, noise_level)
    covered = res > level
    cov = float(covered.mean())
    imprint = float(res[covered].mean()) if covered.any() else 0.0
    if cov < COVERAGE_LO:
        return FrameFeatures(cov, imprint, 0.0, 0, EdgePose(PoseClass.NO_FABRIC, coverage=cov))
    if cov > COVERAGE_HI:
        return FrameFeatures(cov, imprint, 0.0, 0, EdgePose(PoseClass.ALL_FABRIC, coverage=cov))
    pts = _boundary_points(res, level)
    if len(pts) < 3:
        cls = PoseClass.NO_FABRIC if cov < 0.5 else PoseClass.ALL_FABRIC
        return FrameFeatures(cov, imprint, 0.0, len(pts), EdgePose(cls, coverage=cov, flagged=True))
    centroid, theta, rms = tls_line(pts)
    centroid, theta = _trimmed_refit(pts, centroid, theta)
    mid = chord_midpoint(centroid, theta)
    if mid is None:
        mid = centroid
    pose = EdgePose(PoseClass.EDGE, float(mid[0]), float(mid[1]), normalize_angle_deg(theta), cov)
    return FrameFeatures(cov, imprint, rms, len(pts), pose)


def estimate_pose(frame: TactileFrame) -> EdgePose:
    """Classify by imprint coverage, then fit the imprint boundary when an edge is visible."""
    return analyze_frame(frame).pose


def pose_errors(est: EdgePose, truth: EdgePose):
    """Absolute center distance (mm) and orientation difference (deg, modulo 180)."""
    dpos = float(np.hypot(est.cx_mm - truth.cx_mm, est.cy_mm - truth.cy_mm))
    dth = abs(normalize_angle_deg(est.theta_deg - truth.theta_deg))
    return dpos, dth


# -- grasp classification -------------------------------------------------------

N_SAMPLED = 5


def sequence_features(frames) -> np.ndarray:
    """Features of the 5 sampled frames of one grasp attempt."""
    if len(frames) != N_SAMPLED:
        raise ValueError(f"grasp classification needs exactly {N_SAMPLED} frames, got {len(frames)}")
    feats = [analyze_frame(f) for f in frames]
    cov = np.array([f.coverage for f in feats])
    imp = np.array([f.imprint for f in feats]) / IMPRINT_MAX_MM
    rms = np.array([f.residual for f in feats])
    mean_res = np.array([mean_imprint(f) for f in frames])
    onset = (mean_res > ONSET_THRESHOLD_MM).astype(float)
    n_onset = onset.sum()
    growth = imp[0] / (imp[-1] + 1e-3)
    mid_growth = imp[1] / (imp[-1] + 1e-3)
    steps = np.diff(imp)
    c = cov[-1]
    r = min(rms[-1], 3.0)
    return np.concatenate([
        cov, imp, np.minimum(rms, 3.0), onset, steps,
        [n_onset, growth, mid_growth, steps.max(), steps.max() ** 2, c * c, c * (1 - c), r * r, np.sqrt(r),
         float(c > COVERAGE_HI), float(c < COVERAGE_LO)],
    ])


@dataclass
class GraspLabel:
    category: Category
    confidence: dict

    @property
    def edge_confidence(self) -> float:
        return float(self.confidence[Category.EDGE.value])


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class GraspClassifier:
    """Multinomial logistic regression over standardized sequence features."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    history: list = field(default_factory=list, repr=False)

    def proba(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return _softmax(Z @ self.weights + self.bias)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.proba(X), axis=1)

    def classify(self, frames) -> GraspLabel:
        p = self.proba(sequence_features(frames))[0]
        return GraspLabel(CATEGORIES[int(np.argmax(p))], {c.value: float(v) for c, v in zip(CATEGORIES, p)})

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "categories": [c.value for c in CATEGORIES],
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GraspClassifier":
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError("unsupported classifier version")
        return cls(np.array(d["weights"]), np.array(d["bias"]), np.array(d["mean"]), np.array(d["scale"]))

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "GraspClassifier":
        return cls.from_json(json.loads(Path(path).read_text()))


def train_classifier(X: np.ndarray, y: np.ndarray, epochs: int = 1500, lr: float = 0.05, l2: float = 1e-4,
                     seed: int = 0) -> GraspClassifier:
    """Full-batch Adam on softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    n, d = X.shape
    k = len(CATEGORIES)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-9] = 1.0
    Z = (X - mean) / scale
    Y = np.eye(k)[y]
    W = rng.normal(scale=0.01, size=(d, k))
    b = np.zeros(k)
    m = [np.zeros_like(W), np.zeros_like(b)]
    v = [np.zeros_like(W), np.zeros_like(b)]
    history = []
    for t in range(1, epochs + 1):
        P = _softmax(Z @ W + b)
        loss = -np.mean(np.sum(Y * np.log(P + 1e-12), axis=1)) + 0.5 * l2 * np.sum(W * W)
        G = (P - Y) / n
        grads = [Z.T @ G + l2 * W, G.sum(axis=0)]
        for i, (param, g) in enumerate(zip((W, b), grads)):
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mh = m[i] / (1 - 0.9**t)
            vh = v[i] / (1 - 0.999**t)
            param -= lr * mh / (np.sqrt(vh) + 1e-8)
        if t % 50 == 0 or t == 1:
            history.append((t, float(loss)))
    return GraspClassifier(W, b, mean, scale, history)


def classify_grasp(frames, model: GraspClassifier) -> GraspLabel:
    if len(frames) != N_SAMPLED:
        raise ValueError(f"grasp classification needs exactly {N_SAMPLED} frames, got {len(frames)}")
    return model.classify(frames)


def augmented_sequence_samples(scn: GraspScenario, n_aug: int, rng: np.random.Generator, n_frames: int = 30,
                               params: AugmentParams = AugmentParams(clip_depth=False)):
    """Feature vectors of ``n_aug`` augmentations of one recorded grasp attempt.

    Each augmentation shifts the sampling window's end by up to 4 frames and
    applies one rigid motion to all 5 sampled frames.  Depth is not clipped.
    """
    seq = synth_sequence(scn, n_frames)
    out = []
    for a in range(n_aug):
        shift_frames = 0 if a == 0 else int(rng.integers(0, 5))
        frames = [seq[i] for i in sample_indices(n_frames, shift_frames)]
        if a > 0:
            scale = params.no_fabric_scale if scn.category == Category.NO_FABRIC else 1.0
            angle = float(rng.uniform(-1, 1)) * params.max_angle_deg * scale
            shift = rng.uniform(-1, 1, size=2) * params.max_shift_mm * scale
            frames = [augment_with(f, angle, shift) for f in frames]
        out.append(sequence_features(frames))
    return out


def build_classifier_dataset(n_per_category: int, n_aug: int, seed: int, n_frames: int = 30):
    """Synthetic grasp attempts per category, each expanded to ``n_aug`` augmented samples."""
    rng = np.random.default_rng(seed)
    X, y = [], []
    for ci, cat in enumerate(CATEGORIES):
        for _ in range(n_per_category):
            scn = GraspScenario.random(cat, rng)
            feats = augmented_sequence_samples(scn, n_aug, rng, n_frames)
            X.extend(feats)
            y.extend([ci] * len(feats))
    return np.array(X), np.array(y)


def evaluate_classifier(model: GraspClassifier, X: np.ndarray, y: np.ndarray) -> dict:
    pred = model.predict(X)
    edge = CATEGORIES.index(Category.EDGE)
    k = len(CATEGORIES)
    conf = np.zeros((k, k), dtype=int)
    np.add.at(conf, (y, pred), 1)
    return {
        "accuracy": float(np.mean(pred == y)),
        "binary_accuracy": float(np.mean((pred == edge) == (y == edge))),
        "non_edge_accuracy": float(np.mean(pred[y != edge] != edge)),
        "confusion": conf.tolist(),
    }


# -- shear --------------------------------------------------------------------

MARKER_GRID = np.stack(
    np.meshgrid((np.arange(MARKER_COLS) + 0.5) * SENSOR_W_MM / MARKER_COLS,
                (np.arange(MARKER_ROWS) + 0.5) * SENSOR_H_MM / MARKER_ROWS),
    axis=-1,
).reshape(-1, 2)

GRIP_SHEAR_STIFFNESS = 1.0  # N per mm of marker displacement


def marker_field(tangential_load: float, rng: np.random.Generator | None = None, noise_mm: float = 0.002) -> np.ndarray:
    """Marker positions (mm) under a tangential load (N) along the sliding direction."""
    disp = np.zeros_like(MARKER_GRID)
    # Markers nearer the gel center carry more load.
    weight = 0.6 + 0.4 * (BASELINE.max() and np.exp(-((MARKER_GRID[:, 0] - GEL_CENTER[0]) ** 2
                                                       + (MARKER_GRID[:, 1] - GEL_CENTER[1]) ** 2) / (2 * GEL_SIGMA_MM**2)))
    disp[:, 0] = weight * tangential_load / GRIP_SHEAR_STIFFNESS
    if rng is not None and noise_mm > 0:
        disp += rng.normal(scale=noise_mm, size=disp.shape)
    return MARKER_GRID + disp


def shear_signal(frame_t: TactileFrame, frame_prev: TactileFrame) -> float:
    """Mean marker displacement magnitude (mm) between two frames of the same gripper."""
    if frame_t.markers is None or frame_prev.markers is None:
        raise ValueError("shear needs frames carrying marker positions")
    return float(np.mean(np.linalg.norm(frame_t.markers - frame_prev.markers, axis=1)))


def save_frame(path, frame: TactileFrame) -> None:
    units = np.clip(np.rint(frame.depth / FRAME_MM_PER_UNIT), 0, 65535).astype(np.uint16)
    write_pgm(path, units)


def write_tactile_dataset(out_dir, n_per_category: int, seed: int, n_frames: int = 30) -> dict:
    """Directory of 16-bit PGM grasp sequences plus one JSON label file per attempt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for cat in CATEGORIES:
        for i in range(n_per_category):
            scn = GraspScenario.random(cat, rng)
            stem = f"{cat.value}_{i:04d}"
            seq_dir = out / stem
            seq_dir.mkdir(exist_ok=True)
            for fi, frame in enumerate(synth_sequence(scn, n_frames)):
                save_frame(seq_dir / f"frame_{fi:03d}.pgm", frame)
            pose = scn.pose()
            label = {
                "version": SCHEMA_VERSION,
                "category": cat.value,
                "pose": {"class": pose.cls.value, "cx_mm": _num(pose.cx_mm), "cy_mm": _num(pose.cy_mm),
                         "theta_deg": _num(pose.theta_deg)},
                "scenario": {"edge_point": list(scn.edge_point), "edge_angle_deg": scn.edge_angle_deg,
                             "layers": scn.layers, "thickness_mm": scn.thickness_mm, "seed": scn.seed,
                             "contact_offset": scn.contact_offset, "corner_turn": scn.corner_turn},
                "n_frames": n_frames,
                "mm_per_unit": FRAME_MM_PER_UNIT,
            }
            write_json(seq_dir / "label.json", label)
            entries.append(stem)
    manifest = {"version": SCHEMA_VERSION, "kind": "tactile-dataset", "seed": seed, "sequences": entries}
    write_json(out / "manifest.json", manifest)
    return manifest


def load_tactile_sequence(seq_dir):
    """Frames and label dict of one sequence written by :func:`write_tactile_dataset`."""
    seq_dir = Path(seq_dir)
    label = read_json(seq_dir / "label.json")
    scale = float(label.get("mm_per_unit", FRAME_MM_PER_UNIT))
    frames = [TactileFrame(read_pgm(seq_dir / f"frame_{i:03d}.pgm").astype(np.float64) * scale)
              for i in range(int(label["n_frames"]))]
    return frames, label


def dataset_features(root) -> tuple[np.ndarray, np.ndarray]:
    """Classifier features and category indices for a written tactile dataset (no augmentation)."""
    root = Path(root)
    man = read_json(root / "manifest.json")
    if man.get("kind") != "tactile-dataset":
        raise ValueError("not a tactile dataset manifest")
    X, y = [], []
    names = [c.value for c in CATEGORIES]
    for stem in man["sequences"]:
        frames, label = load_tactile_sequence(root / stem)
        X.append(sequence_features([frames[i] for i in sample_indices(len(frames))]))
        y.append(names.index(label["category"]))
    return np.array(X), np.array(y)


def _num(x):
    return None if x != x else float(x)
