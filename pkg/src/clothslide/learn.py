"""Patch-based affordance regressor, rotation grasp policy and replay fine-tuning.

The regressor maps a (2r+1)^2 depth patch to a grasp affordance in (0, 1)
through one tanh hidden layer.  Depth enters in absolute terms, so a camera
moved to a new distance shifts every input: that is the domain gap the
transfer experiment measures.
"""

from __future__ import annotations

import csv
import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tactile
from .affordance import (AffordanceMap, Scene, SimEnv, evaluate_criteria, gripper_orientation,
                         make_scene)
from .cloth import ClothParams, NodeClass
from .imageio import SCHEMA_VERSION, read_json, read_pgm, u16_to_depth, write_json
from .render import Camera

ROTATE = "ROTATE"


class TrainingDivergence(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"training diverged (non-finite loss) at iteration {iteration}")
        self.iteration = iteration


# -- model ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class PatchRegressor:
    radius: int = 10
    hidden: int = 32
    depth_ref: float = 0.95
    depth_scale: float = 0.1
    seed: int = 0
    params: np.ndarray = None
    mask_channel: bool = True
    stride: int = 1

    def __post_init__(self):
        if self.radius < 1 or self.hidden < 1 or self.stride < 1:
            raise ValueError("radius, hidden and stride must be positive")
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            d, h = self.n_inputs, self.hidden
            w1 = rng.normal(scale=1.0 / np.sqrt(d), size=(h, d))
            w2 = rng.normal(scale=1.0 / np.sqrt(h), size=h)
            self.params = np.concatenate([w1.ravel(), np.zeros(h), w2, [0.0]])
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_inputs(self) -> int:
        return self.side * self.side * (2 if self.mask_channel else 1)

    @property
    def n_params(self) -> int:
        return self.hidden * (self.n_inputs + 2) + 1

    def unpack(self, params=None):
        p = self.params if params is None else params
        d, h = self.n_inputs, self.hidden
        w1 = p[: h * d].reshape(h, d)
        b1 = p[h * d : h * d + h]
        w2 = p[h * d + h : h * d + 2 * h]
        return w1, b1, w2, p[-1]

    def predict(self, patches: np.ndarray, params=None) -> np.ndarray:
        w1, b1, w2, b2 = self.unpack(params)
        return _sigmoid(np.tanh(np.atleast_2d(patches) @ w1.T + b1) @ w2 + b2)

    def loss_and_grad(self, patches: np.ndarray, targets: np.ndarray, params=None):
        """Mean squared error and its gradient with respect to the flat parameter vector."""
        w1, b1, w2, b2 = self.unpack(params)
        X = np.atleast_2d(patches)
        H = np.tanh(X @ w1.T + b1)
        out = _sigmoid(H @ w2 + b2)
        err = out - targets
        n = len(X)
        loss = float(np.mean(err * err))
        dz = 2.0 * err * out * (1.0 - out) / n
        g_w2 = H.T @ dz
        g_b2 = dz.sum()
        dh = np.outer(dz, w2) * (1.0 - H * H)
        g_w1 = dh.T @ X
        g_b1 = dh.sum(axis=0)
        return loss, np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])

    def normalize(self, depth: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Cloth pixels to (ref - depth) / scale, masked and empty pixels to 0.

        With ``mask_channel`` the cloth mask is stacked as a second channel.
        """
        depth = np.asarray(depth, dtype=np.float64)
        m = depth > 0 if mask is None else (np.asarray(mask, dtype=bool) & (depth > 0))
        d = np.where(m, (self.depth_ref - depth) / self.depth_scale, 0.0)
        return np.stack([d, m.astype(np.float64)]) if self.mask_channel else d

    def copy(self) -> "PatchRegressor":
        return PatchRegressor(self.radius, self.hidden, self.depth_ref, self.depth_scale, self.seed,
                              self.params.copy(), self.mask_channel, self.stride)

    def patches(self, img: np.ndarray, rows, cols) -> np.ndarray:
        return extract_patches(img, rows, cols, self.radius, self.stride)

    def to_json(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "patch-regressor", "radius": self.radius, "hidden": self.hidden,
                "depth_ref": self.depth_ref, "depth_scale": self.depth_scale, "seed": self.seed,
                "mask_channel": self.mask_channel, "stride": self.stride, "params": self.params.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PatchRegressor":
        if d.get("kind") != "patch-regressor" or d.get("version") != SCHEMA_VERSION:
            raise ValueError("not a patch-regressor document of a supported version")
        return cls(d["radius"], d["hidden"], d["depth_ref"], d["depth_scale"], d["seed"], np.array(d["params"]),
                   d["mask_channel"], d["stride"])

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "PatchRegressor":
        return cls.from_json(read_json(path))


def extract_patches(img: np.ndarray, rows, cols, radius: int, stride: int = 1) -> np.ndarray:
    """Flattened (2*radius+1)^2 patches centered on (rows, cols), sampling every ``stride`` pixels.

    Outside the image reads as 0.  ``img`` is (H, W) or channel-first
    (C, H, W); channels are concatenated.
    """
    reach = radius * stride
    span = 2 * reach + 1
    rows, cols = np.atleast_1d(rows), np.atleast_1d(cols)
    img3 = img[None] if img.ndim == 2 else img
    padded = np.pad(img3, ((0, 0), (reach, reach), (reach, reach)))
    windows = sliding_window_view(padded, (span, span), axis=(1, 2))[..., ::stride, ::stride]
    return windows[:, rows, cols].transpose(1, 0, 2, 3).reshape(len(rows), -1)


class Adam:
    def __init__(self, n: int, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


# -- data ----------------------------------------------------------------------------

@dataclass
class AffordanceData:
    """Stacked (depth, mask, target) images for pretraining."""

    depth: np.ndarray
    mask: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.depth)

    @classmethod
    def from_scenes(cls, scenes, occlusion_seed: int | None = None, env: SimEnv = SimEnv()) -> "AffordanceData":
        from .render import add_black_rectangles

        depth, target = [], []
        for i, sc in enumerate(scenes):
            d = sc.depth
            if occlusion_seed is not None:
                d = add_black_rectangles(d, [occlusion_seed, i], env.occlusion_count, env.occlusion_size_px)
            depth.append(d.depth)
            target.append(sc.affordance.values)
        depth = np.array(depth)
        return cls(depth, depth > 0, np.array(target))

    @classmethod
    def from_manifest(cls, path, use_augmented: bool = True) -> "AffordanceData":
        path = Path(path)
        root = path.parent if path.is_file() else path
        man = read_json(root / "manifest.json" if path.is_dir() else path)
        if man.get("kind") != "affordance-dataset":
            raise ValueError("not an affordance dataset manifest")
        scale = float(man["affordance_scale"])
        depth, target = [], []
        for e in man["entries"]:
            depth.append(u16_to_depth(read_pgm(root / e["depth_aug" if use_augmented else "depth"])))
            target.append(read_pgm(root / e["affordance"]).astype(np.float64) / scale)
        depth = np.array(depth)
        return cls(depth, depth > 0, np.array(target))

    def split(self, val_fraction: float, seed: int):
        idx = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        v, t = idx[:n_val], idx[n_val:]
        return (AffordanceData(self.depth[t], self.mask[t], self.target[t]),
                AffordanceData(self.depth[v], self.mask[v], self.target[v]))

    def pixels(self):
        return np.argwhere(self.mask)

    def batch(self, model: PatchRegressor, pix: np.ndarray):
        """Normalized patches and targets for rows of (image, row, col)."""
        out = np.empty((len(pix), model.n_inputs))
        for i in np.unique(pix[:, 0]):
            sel = pix[:, 0] == i
            img = model.normalize(self.depth[i], self.mask[i])
            out[sel] = model.patches(img, pix[sel, 1], pix[sel, 2])
        return out, self.target[pix[:, 0], pix[:, 1], pix[:, 2]]


def evaluate_mse(model: PatchRegressor, data: AffordanceData, max_pixels: int = 20000, seed: int = 0) -> float:
    pix = data.pixels()
    if len(pix) > max_pixels:
        pix = pix[np.sort(np.random.default_rng(seed).choice(len(pix), max_pixels, replace=False))]
    X, t = data.batch(model, pix)
    return float(np.mean((model.predict(X) - t) ** 2))


def cloth_depth_median(depths) -> float:
    vals = np.concatenate([np.asarray(d)[np.asarray(d) > 0] for d in depths])
    if len(vals) == 0:
        raise ValueError("no cloth pixels to calibrate on")
    return float(np.median(vals))


def calibrated(model: PatchRegressor, depths) -> PatchRegressor:
    """Copy whose depth reference is the median cloth depth of ``depths``."""
    out = model.copy()
    out.depth_ref = cloth_depth_median(depths)
    return out


def pretrain(model: PatchRegressor, data: AffordanceData, epochs: int = 20, steps_per_epoch: int = 200,
             batch_size: int = 256, lr: float = 3e-3, seed: int = 0, images_per_batch: int = 16):
    """Adam on per-pixel MSE with patches drawn uniformly over cloth pixels.

    Each minibatch draws ``images_per_batch`` images and then cloth pixels
    within them, so only those images need normalizing.  The depth reference
    is set to the training set's median cloth depth.  Returns the trained
    copy and the final epoch's mean loss.
    """
    model = calibrated(model, data.depth)
    rng = np.random.default_rng(seed)
    counts = data.mask.reshape(len(data), -1).sum(axis=1)
    if counts.sum() == 0:
        raise ValueError("dataset has no cloth pixels")
    img_p = counts / counts.sum()
    pix_of = [np.flatnonzero(m.ravel()) for m in data.mask]
    width = data.depth.shape[2]
    per = max(1, batch_size // images_per_batch)
    opt = Adam(model.n_params, lr)
    it = 0
    loss_epoch = float("nan")
    for _ in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            it += 1
            Xs, ts = [], []
            for i in rng.choice(len(data), images_per_batch, p=img_p):
                flat = pix_of[i][rng.integers(len(pix_of[i]), size=per)]
                r, c = np.divmod(flat, width)
                Xs.append(model.patches(model.normalize(data.depth[i], data.mask[i]), r, c))
                ts.append(data.target[i, r, c])
            loss, g = model.loss_and_grad(np.vstack(Xs), np.concatenate(ts))
            if not np.isfinite(loss):
                raise TrainingDivergence(it)
            opt.step(model.params, g)
            total += loss
        loss_epoch = total / steps_per_epoch
    return model, loss_epoch


# -- policy --------------------------------------------------------------------------

def predict_map(model: PatchRegressor, depth: np.ndarray, mask: np.ndarray | None = None,
                orientation: np.ndarray | None = None) -> AffordanceMap:
    depth = np.asarray(depth, dtype=np.float64)
    m = depth > 0 if mask is None else (np.asarray(mask, dtype=bool) & (depth > 0))
    values = np.zeros(depth.shape)
    rows, cols = np.nonzero(m)
    if len(rows):
        values[rows, cols] = model.predict(model.patches(model.normalize(depth, m), rows, cols))
    return AffordanceMap(values, gripper_orientation() if orientation is None else orientation)


def select_grasp(values: np.ndarray, reach_mask: np.ndarray, threshold: float, exclude: np.ndarray | None = None):
    """Argmax pixel over the allowed mask if it clears ``threshold``, else ROTATE.

    Ties go to the lowest (row, col) because argmax scans row-major.
    """
    allowed = np.asarray(reach_mask, dtype=bool)
    if exclude is not None:
        allowed = allowed & ~exclude
    if not allowed.any():
        return ROTATE
    masked = np.where(allowed, values, -np.inf)
    idx = int(np.argmax(masked))
    if masked.flat[idx] < threshold:
        return ROTATE
    return divmod(idx, values.shape[1])


# -- grasp attempts ------------------------------------------------------------------

@dataclass
class GraspOutcome:
    pixel: tuple
    scenario: tactile.GraspScenario
    label: tactile.GraspLabel
    criteria: tuple

    @property
    def confidence(self) -> float:
        """Edge-likeness used as the supervision label: edge plus corner probability."""
        c = self.label.confidence
        return float(c[tactile.Category.EDGE.value] + c[tactile.Category.CORNER.value])


def grasp_scenario(scene: Scene, row: int, col: int, env: SimEnv, rng: np.random.Generator) -> tuple:
    """Tactile scenario produced by closing the gripper at the pixel's surface point."""
    mesh = scene.mesh
    geom = env.gripper
    rot = gripper_orientation()
    center = scene.hit.points[row, col]
    e, f, s, r = (float(a[0]) for a in evaluate_criteria(mesh, center[None], rot, geom))
    loc = (mesh.positions - center) @ rot
    inside = ((np.abs(loc[:, 0]) <= geom.finger_len / 2) & (np.abs(loc[:, 1]) <= geom.opening_w / 2)
              & (np.abs(loc[:, 2]) <= geom.finger_depth / 2))
    crit = (e, f, s, r)
    if not inside.any() or f < 0.5 or r < 0.5:
        return tactile.GraspScenario.random(tactile.Category.NO_FABRIC, rng), crit
    if s < 0.5:
        return tactile.GraspScenario.random(tactile.Category.FOLD, rng), crit
    if e < 0.5:
        return tactile.GraspScenario.random(tactile.Category.ALL_FABRIC, rng), crit
    cls = mesh.node_class[inside]
    cat = tactile.Category.CORNER if np.any(cls == NodeClass.CORNER) else tactile.Category.EDGE
    scn = tactile.GraspScenario.random(cat, rng)
    # Orient the imprint with the captured boundary when it is resolvable.
    edge_nodes = loc[inside & (mesh.node_class != NodeClass.INTERIOR)]
    if cat == tactile.Category.EDGE and len(edge_nodes) >= 2:
        pts = np.column_stack([edge_nodes[:, 2] * 1e3 + tactile.SENSOR_W_MM / 2,
                               (edge_nodes[:, 0] + geom.finger_len / 2) / geom.finger_len * tactile.SENSOR_H_MM])
        _, theta, _ = tactile.tls_line(pts)
        theta = float(np.clip(tactile.normalize_angle_deg(theta), -35.0, 35.0))
        scn = tactile.GraspScenario(cat, scn.edge_point, theta, 1, scn.thickness_mm, scn.seed, scn.contact_offset,
                                    scn.corner_turn, scn.noise, scn.wave_mm)
    return scn, crit


def grasp_attempt(scene: Scene, row: int, col: int, env: SimEnv, classifier: tactile.GraspClassifier,
                  seed) -> GraspOutcome:
    rng = np.random.default_rng(seed)
    scn, crit = grasp_scenario(scene, row, col, env, rng)
    n = 30
    frames = [tactile.synth_frame(scn, i / (n - 1), i) for i in tactile.sample_indices(n)]
    return GraspOutcome((row, col), scn, tactile.classify_grasp(frames, classifier), crit)


# -- replay --------------------------------------------------------------------------

@dataclass
class ReplaySample:
    patch: np.ndarray
    pixel: tuple
    label: float
    source: str = "online"

    def __post_init__(self):
        if not 0.0 <= self.label <= 1.0:
            raise ValueError("label must lie in [0, 1]")
        if self.source not in ("pretrain", "online"):
            raise ValueError("source must be pretrain or online")


class ReplayBuffer:
    """Bounded FIFO of replay samples with positive/negative counts at 0.5."""

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self.n_pos = 0
        self.n_neg = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, sample: ReplaySample) -> None:
        if len(self._items) == self.capacity:
            old = self._items.popleft()
            if old.label >= 0.5:
                self.n_pos -= 1
            else:
                self.n_neg -= 1
        self._items.append(sample)
        if sample.label >= 0.5:
            self.n_pos += 1
        else:
            self.n_neg += 1

    def sample_balanced(self, n: int, rng: np.random.Generator) -> list:
        """Half positives and half negatives when both exist, otherwise whatever is there."""
        if not self._items:
            return []
        labels = np.array([s.label >= 0.5 for s in self._items])
        pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
        if len(pos) and len(neg):
            idx = np.concatenate([rng.choice(pos, n // 2), rng.choice(neg, n - n // 2)])
        else:
            idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


def neighborhood(pixel, shape, radius: int = 3):
    """Pixels at Chebyshev distance <= radius inside the image, the center first."""
    r0, c0 = pixel
    out = [(r0, c0)]
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = r0 + dr, c0 + dc
            if (dr or dc) and 0 <= r < shape[0] and 0 <= c < shape[1]:
                out.append((r, c))
    return out


def sample_group(model: PatchRegressor, depth: np.ndarray, mask: np.ndarray, pixel, label: float,
                 radius: int = 3, source: str = "online") -> list:
    img = model.normalize(depth, mask)
    pix = neighborhood(pixel, depth.shape, radius)
    rows, cols = zip(*pix)
    patches = model.patches(img, list(rows), list(cols))
    return [ReplaySample(p, px, float(label), source) for p, px in zip(patches, pix)]


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    lr: float = 1e-3
    steps_per_grasp: int = 4
    neighborhood: int = 3
    replay: bool = True
    ema: float = 0.0
    feature_lr_scale: float = 1.0


class Finetuner:
    """Online single-grasp updates of a model, with or without the replay buffer."""

    def __init__(self, model: PatchRegressor, cfg: FinetuneConfig = FinetuneConfig(), capacity: int = 10000,
                 seed: int = 0):
        self.model = model.copy()
        self.cfg = cfg
        self.buffer = ReplayBuffer(capacity)
        self.opt = Adam(model.n_params, cfg.lr)
        if cfg.feature_lr_scale != 1.0:
            # Slower first-layer weights: adapt biases and the readout first.
            scale = np.ones(model.n_params)
            scale[: model.hidden * model.n_inputs] = cfg.feature_lr_scale
            self.opt.lr = cfg.lr * scale
        self.rng = np.random.default_rng(seed)
        self.last_batch: list = []
        self._avg = self.model.params.copy()

    def averaged(self) -> PatchRegressor:
        """Exponential moving average of the weights (the live weights when ``ema`` is 0)."""
        if self.cfg.ema <= 0:
            return self.model.copy()
        out = self.model.copy()
        out.params = self._avg.copy()
        return out

    def step(self, group: list) -> float:
        """Push the new group, then take ``steps_per_grasp`` gradient steps; returns the last loss."""
        cfg = self.cfg
        for s in group:
            self.buffer.push(s)
        loss = float("nan")
        for _ in range(cfg.steps_per_grasp):
            if cfg.replay and len(self.buffer) > len(group):
                n_new = cfg.batch_size // 2
                batch = [group[i] for i in self.rng.integers(len(group), size=n_new)]
                batch += self.buffer.sample_balanced(cfg.batch_size - n_new, self.rng)
            else:
                batch = [group[i] for i in self.rng.integers(len(group), size=cfg.batch_size)]
            self.last_batch = batch
            X = np.array([s.patch for s in batch])
            t = np.array([s.label for s in batch])
            loss, g = self.model.loss_and_grad(X, t)
            if not np.isfinite(loss):
                raise TrainingDivergence(self.opt.t + 1)
            self.opt.step(self.model.params, g)
            if self.cfg.ema > 0:
                self._avg = self.cfg.ema * self._avg + (1.0 - self.cfg.ema) * self.model.params
        return loss


def finetune_step(model: PatchRegressor, buffer: ReplayBuffer, sample: ReplaySample, depth: np.ndarray | None = None,
                  mask: np.ndarray | None = None, cfg: FinetuneConfig = FinetuneConfig(), seed: int = 0,
                  state: Finetuner | None = None) -> PatchRegressor:
    """Functional single update: expand the sample's neighborhood, push, take one replay step."""
    tuner = state or Finetuner(model, cfg, buffer.capacity, seed)
    tuner.buffer = buffer
    if depth is not None:
        group = sample_group(model, depth, mask, sample.pixel, sample.label, cfg.neighborhood, sample.source)
    else:
        group = [sample]
    tuner.step(group)
    return tuner.model


# -- evaluation ----------------------------------------------------------------------

@dataclass
class LabeledSet:
    """Labeled grasp pixels with the depth images they came from."""

    depth: np.ndarray
    mask: np.ndarray
    pixels: np.ndarray
    labels: np.ndarray
    oracle: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    def save(self, path) -> None:
        np.savez_compressed(path, depth=self.depth, mask=self.mask, pixels=self.pixels, labels=self.labels,
                            oracle=self.oracle if self.oracle is not None else np.full(len(self), np.nan))

    @classmethod
    def load(cls, path) -> "LabeledSet":
        with np.load(path) as z:
            oracle = z["oracle"]
            return cls(z["depth"], z["mask"], z["pixels"], z["labels"], None if np.isnan(oracle).all() else oracle)

    def patches(self, model: PatchRegressor) -> np.ndarray:
        out = np.empty((len(self), model.n_inputs))
        for i in range(len(self)):
            img = model.normalize(self.depth[i], self.mask[i])
            out[i] = model.patches(img, [self.pixels[i, 0]], [self.pixels[i, 1]])[0]
        return out


def precision_at_k(scorer, labeled, k: int = 40) -> float:
    """Fraction of positives among the k highest scores; ties keep input order.

    ``scorer`` is a PatchRegressor (scored on ``labeled``'s patches) or an
    array of precomputed scores; ``labeled`` is a LabeledSet or a label array.
    """
    labels = labeled.labels if isinstance(labeled, LabeledSet) else np.asarray(labeled)
    n = len(labels)
    if k > n:
        raise ValueError(f"k={k} exceeds labeled set size {n}")
    if k < 1:
        raise ValueError("k must be positive")
    if isinstance(scorer, PatchRegressor):
        scores = scorer.predict(labeled.patches(scorer))
    else:
        scores = np.asarray(scorer, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return float(np.mean(np.asarray(labels)[order[:k]] >= 0.5))


# -- experiments ---------------------------------------------------------------------

def target_env(source: SimEnv = SimEnv()) -> SimEnv:
    """Shifted camera, larger and stiffer-bending cloth: the deployment domain."""
    c = source.cloth
    cloth = ClothParams(width_m=c.width_m * 1.15, height_m=c.height_m * 0.9, grid_w=c.grid_w, grid_h=c.grid_h,
                        stretch_stiffness=c.stretch_stiffness * 1.25, shear_stiffness=c.shear_stiffness * 1.5,
                        bend_stiffness=c.bend_stiffness * 2.0, node_mass=c.node_mass, damping=c.damping)
    cam = source.camera
    camera = Camera(position=(cam.position[0] + 0.1, cam.position[1] - 0.2, cam.position[2] + 0.2),
                    look_at=cam.look_at, up=cam.up, hfov_deg=cam.hfov_deg, width=cam.width, height=cam.height,
                    near=cam.near, far=cam.far)
    return SimEnv(cloth, camera, source.gripper, source.reach, source.rotation_increment_deg,
                  source.occlusion_count, source.occlusion_size_px)


def scenes_for(env: SimEnv, seeds, n_rot: int | None = None):
    n_rot = n_rot or int(round(360 / env.rotation_increment_deg))
    for s in seeds:
        for ri in range(n_rot):
            yield make_scene(env, s, ri * env.rotation_increment_deg)


@dataclass
class OnlineLog:
    grasps: int = 0
    positives: int = 0
    rotations: int = 0
    curve: list = field(default_factory=list)


def online_training(model: PatchRegressor, env: SimEnv, seeds, classifier: tactile.GraspClassifier, budget: int,
                    cfg: FinetuneConfig = FinetuneConfig(), threshold: float = 0.0, attempts_per_rotation: int = 3,
                    seed: int = 0, heldout: LabeledSet | None = None, eval_every: int = 25, k: int = 40,
                    stop_at: float | None = None, prefill=(), calibrate: bool = True):
    """Threshold-rotation grasping with tactile labels until ``budget`` grasps are spent.

    Attempted pixels are excluded for the rest of that rotation.  ``prefill``
    samples enter the replay buffer before the first grasp.  With
    ``calibrate`` the depth reference is first re-estimated from the first
    configuration's images, as pretraining does on its own data.  With a held-out
    set, precision@k of the (averaged) model is logged every ``eval_every``
    grasps; ``stop_at`` ends training once that precision is reached.
    """
    scenes = scenes_for(env, seeds)
    if calibrate:
        first = [next(scenes) for _ in range(int(round(360 / env.rotation_increment_deg)))]
        model = calibrated(model, [sc.depth.depth for sc in first])
        scenes = itertools.chain(first, scenes)
    tuner = Finetuner(model, cfg, seed=seed)
    for smp in prefill:
        tuner.buffer.push(smp)
    log = OnlineLog()

    def checkpoint() -> bool:
        log.curve.append((log.grasps, precision_at_k(tuner.averaged(), heldout, k)))
        return stop_at is not None and log.curve[-1][1] >= stop_at

    if heldout is not None and checkpoint():
        return tuner.averaged(), log
    for scene in scenes:
        log.rotations += 1
        mask = scene.depth.cloth_mask
        tried = np.zeros(mask.shape, dtype=bool)
        for _ in range(attempts_per_rotation):
            amap = predict_map(tuner.model, scene.depth.depth, mask)
            choice = select_grasp(amap.values, scene.reach_mask, threshold, tried)
            if choice == ROTATE:
                break
            r, c = choice
            tried[r, c] = True
            out = grasp_attempt(scene, r, c, env, classifier, [seed, log.grasps, 11])
            label = out.confidence
            log.grasps += 1
            log.positives += int(label >= 0.5)
            tuner.step(sample_group(tuner.model, scene.depth.depth, mask, (r, c), label, cfg.neighborhood))
            if heldout is not None and log.grasps % eval_every == 0 and checkpoint():
                return tuner.averaged(), log
            if log.grasps >= budget:
                return tuner.averaged(), log
    return tuner.averaged(), log


def pretrain_samples(model: PatchRegressor, data: AffordanceData, n: int, seed: int = 0) -> list:
    """Balanced replay samples drawn from the pretraining images (labels = geometric affordance)."""
    rng = np.random.default_rng(seed)
    pix = data.pixels()
    tgt = data.target[pix[:, 0], pix[:, 1], pix[:, 2]]
    pos, neg = np.flatnonzero(tgt >= 0.5), np.flatnonzero(tgt < 0.5)
    take = np.concatenate([rng.choice(pos, min(len(pos), n // 2), replace=False),
                           rng.choice(neg, min(len(neg), n - n // 2), replace=False)])
    take = take[rng.permutation(len(take))]
    X, t = data.batch(model, pix[take])
    return [ReplaySample(x, (int(p[1]), int(p[2])), float(v), "pretrain") for x, v, p in zip(X, t, pix[take])]


def build_heldout(env: SimEnv, seeds, classifier: tactile.GraspClassifier, n_pos: int = 40, n_neg: int = 70,
                  seed: int = 0, n_rot: int = 24, per_scene: int = 3, interior: bool = False) -> LabeledSet:
    """Tactile-labeled grasp attempts on held-out target scenes.

    Candidates are reachable cloth pixels: geometrically graspable ones and
    others near the cloth outline (plus others anywhere with ``interior``);
    pixels within 3 px of a graspable one are left out so every candidate is
    a distinct grasp.  Positives and negatives are then drawn by their
    tactile label.
    """
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    for scene in scenes_for(env, seeds, n_rot):
        aff = scene.affordance.values
        reach = scene.reach_mask
        good = aff >= 0.5
        other = reach & ~_dilate(good, 3)
        outline = other & _dilate(~scene.depth.cloth_mask, 4)
        cands = []
        pools = [np.argwhere(reach & good), np.argwhere(outline)] + ([np.argwhere(other)] if interior else [])
        for pool in pools:
            if len(pool):
                cands += [tuple(p) for p in pool[rng.choice(len(pool), min(len(pool), per_scene), replace=False)]]
        for r, c in cands:
            out = grasp_attempt(scene, r, c, env, classifier, [seed, r, c, len(pos) + len(neg), 5])
            item = (scene.depth.depth, (r, c), out.confidence, aff[r, c])
            (pos if out.confidence >= 0.5 else neg).append(item)
    if len(pos) < n_pos or len(neg) < n_neg:
        raise ValueError(f"held-out scenes yield {len(pos)} positives and {len(neg)} negatives; need {n_pos}/{n_neg}")
    pi = rng.choice(len(pos), n_pos, replace=False)
    ni = rng.choice(len(neg), n_neg, replace=False)
    items = [pos[i] for i in pi] + [neg[i] for i in ni]
    items = [items[i] for i in rng.permutation(len(items))]
    depth = np.array([it[0] for it in items])
    return LabeledSet(depth, depth > 0, np.array([it[1] for it in items]),
                      np.array([float(it[2] >= 0.5) for it in items]), np.array([it[3] for it in items]))


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, np.ones((2 * r + 1, 2 * r + 1), dtype=bool))


@dataclass
class TransferConfig:
    source_seeds: tuple = tuple(range(0, 30))
    target_train_seeds: tuple = tuple(range(1000, 1040))
    target_heldout_seeds: tuple = tuple(range(2000, 2012))
    pretrain_epochs: int = 20
    steps_per_epoch: int = 200
    grasp_budget: int = 300
    threshold: float = 0.0
    k: int = 40
    n_pos: int = 40
    n_neg: int = 70
    classifier_per_category: int = 120
    classifier_aug: int = 6
    stride: int = 2
    finetune_lr: float = 1e-4
    scratch_lr: float = 1e-3

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def train_default_classifier(n_per_category: int = 120, n_aug: int = 6, seed: int = 0) -> tactile.GraspClassifier:
    X, y = tactile.build_classifier_dataset(n_per_category, n_aug, seed)
    return tactile.train_classifier(X, y, seed=seed)


def run_transfer_experiment(source: SimEnv = SimEnv(), target: SimEnv | None = None, seed: int = 0,
                            cfg: TransferConfig = TransferConfig(), classifier=None, source_model=None,
                            out_dir=None) -> dict:
    """SourceOnly, TargetScratch, SourceFinetuned and the geometric oracle, by precision@k on target."""
    target = target or target_env(source)
    classifier = classifier or train_default_classifier(cfg.classifier_per_category, cfg.classifier_aug, seed)
    template = PatchRegressor(seed=seed, stride=cfg.stride)
    heldout = build_heldout(target, cfg.target_heldout_seeds, classifier, cfg.n_pos, cfg.n_neg, seed)
    if source_model is None:
        data = AffordanceData.from_scenes(list(scenes_for(source, cfg.source_seeds)), occlusion_seed=seed, env=source)
        source_model, _ = pretrain(template, data, cfg.pretrain_epochs, cfg.steps_per_epoch, seed=seed)
    finetuned, ft_log = online_training(source_model, target, cfg.target_train_seeds, classifier, cfg.grasp_budget,
                                        FinetuneConfig(lr=cfg.finetune_lr), cfg.threshold, seed=seed, heldout=heldout)
    scratch, sc_log = online_training(template.copy(), target, cfg.target_train_seeds, classifier,
                                      cfg.grasp_budget, FinetuneConfig(lr=cfg.scratch_lr), cfg.threshold, seed=seed,
                                      heldout=heldout)
    report = {
        "version": SCHEMA_VERSION,
        "kind": "transfer-report",
        "seed": seed,
        "k": cfg.k,
        "heldout_size": len(heldout),
        "heldout_positives": int(heldout.labels.sum()),
        "precision_at_k": {
            "SourceOnly": precision_at_k(source_model, heldout, cfg.k),
            "TargetScratch": precision_at_k(scratch, heldout, cfg.k),
            "SourceFinetuned": precision_at_k(finetuned, heldout, cfg.k),
            "GeometricOracle": precision_at_k(heldout.oracle, heldout, cfg.k),
        },
        "grasps": {"SourceFinetuned": ft_log.grasps, "TargetScratch": sc_log.grasps},
        "online_positive_rate": {"SourceFinetuned": ft_log.positives / max(ft_log.grasps, 1),
                                 "TargetScratch": sc_log.positives / max(sc_log.grasps, 1)},
        "config": cfg.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"transfer_seed{seed}.json", report)
        write_curves(out / f"transfer_seed{seed}_curves.csv", {"SourceFinetuned": ft_log.curve,
                                                                "TargetScratch": sc_log.curve})
        finetuned.save(out / f"finetuned_seed{seed}.json")
        scratch.save(out / f"scratch_seed{seed}.json")
        heldout.save(out / f"heldout_seed{seed}.npz")
        source_model.save(out / f"source_seed{seed}.json")
    return report


def write_curves(path, curves: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "grasps", "precision_at_k"])
        for name, pts in curves.items():
            for g, p in pts:
                w.writerow([name, g, f"{p:.6f}"])


def replay_efficiency(source_model: PatchRegressor, target: SimEnv, classifier, heldout: LabeledSet,
                      target_precision: float, budget: int, seeds, seed: int = 0, eval_every: int = 20, k: int = 40):
    """Grasps until precision@k reaches the target, with and without replay (budget + 1 if never).

    Depth recalibration is off so only the supervised updates differ.
    """
    out = {}
    for name, replay in (("replay", True), ("no_replay", False)):
        _, log = online_training(source_model, target, seeds, classifier, budget, FinetuneConfig(replay=replay),
                                 seed=seed, heldout=heldout, eval_every=eval_every, k=k, stop_at=target_precision,
                                 calibrate=False)
        hit = [g for g, p in log.curve if p >= target_precision]
        out[name] = {"grasps_to_target": hit[0] if hit else budget + 1, "curve": log.curve}
    return out
