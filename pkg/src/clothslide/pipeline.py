"""Task state machine: pick from ground, corner grasp, edge search with rotation, slide to the next corner."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tactile
from .affordance import Scene, SimEnv, make_scene
from .cloth import make_configuration
from .imageio import SCHEMA_VERSION, write_json
from .learn import ROTATE, PatchRegressor, grasp_attempt, predict_map, select_grasp, target_env
from .render import reachability_mask, render_depth
from .sliding import SHEAR_THRESHOLD_MM, VERTICAL_KP, SlidingPlant, vertical_slide


class ContractError(ValueError):
    """An observation that is not valid for the current state."""


class Phase(str, enum.Enum):
    PICK_FROM_GROUND = "PickFromGround"
    CORNER_GRASP = "CornerGrasp"
    EDGE_GRASP_SEARCH = "EdgeGraspSearch"
    ROTATE = "Rotate"
    SLIDE = "Slide"
    TWO_CORNERS = "TwoCorners"
    RESTART = "Restart"


P = Phase
TRANSITIONS = {
    (P.PICK_FROM_GROUND, "picked"): P.CORNER_GRASP,
    (P.PICK_FROM_GROUND, "missed"): P.RESTART,
    (P.CORNER_GRASP, "corner_held"): P.EDGE_GRASP_SEARCH,
    (P.CORNER_GRASP, "visual_check_failed"): P.RESTART,
    (P.CORNER_GRASP, "dropped"): P.RESTART,
    (P.EDGE_GRASP_SEARCH, "edge_confirmed"): P.SLIDE,
    (P.EDGE_GRASP_SEARCH, "rejected"): P.EDGE_GRASP_SEARCH,
    (P.EDGE_GRASP_SEARCH, "no_grasp"): P.ROTATE,
    (P.EDGE_GRASP_SEARCH, "attempts_exhausted"): P.ROTATE,
    (P.EDGE_GRASP_SEARCH, "dropped"): P.RESTART,
    (P.ROTATE, "rotated"): P.EDGE_GRASP_SEARCH,
    (P.ROTATE, "full_rotation"): P.RESTART,
    (P.SLIDE, "corner_reached"): P.TWO_CORNERS,
    (P.SLIDE, "dropped"): P.RESTART,
    (P.SLIDE, "stalled"): P.RESTART,
    (P.RESTART, "reset"): P.PICK_FROM_GROUND,
}
TERMINAL = (P.TWO_CORNERS,)
FULL_ROTATION = 24


@dataclass(frozen=True)
class TaskState:
    phase: Phase = P.PICK_FROM_GROUND
    rotation: int = 0
    attempts_this_rotation: int = 0
    grasp_attempts: int = 0
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if min(self.rotation, self.attempts_this_rotation, self.grasp_attempts, self.restarts) < 0:
            raise ValueError("counters must be nonnegative")
        if self.rotation > FULL_ROTATION:
            raise ValueError(f"rotation counter above {FULL_ROTATION}")


@dataclass(frozen=True)
class Action:
    name: str
    detail: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class FailureRates:
    """Probabilities of forced failures, each drawn from the episode's RNG."""

    pick_miss: float = 0.0
    visual_false_negative: float = 0.0
    corner_drop: float = 0.0
    search_drop: float = 0.0
    tactile_false_positive: float = 0.0
    tactile_false_negative: float = 0.0
    slide_drop: float = 0.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")


@dataclass(frozen=True)
class EpisodeConfig:
    env: SimEnv = field(default_factory=lambda: target_env(SimEnv()))
    threshold: float = 0.6
    attempts_per_rotation: int = 3
    exclusion_radius: int = 3
    smooth_sigma: float = 1.0
    step_cap: int = 5000
    max_restarts: int = 4
    k_p: float = VERTICAL_KP
    shear_threshold: float = SHEAR_THRESHOLD_MM
    thick_hem_mm: float = 0.9
    failures: FailureRates = FailureRates()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("env", "failures")}
        d["env"] = self.env.to_dict()
        d["failures"] = dict(self.failures.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k not in ("env", "failures")}
        if "env" in d:
            kw["env"] = SimEnv.from_dict(d["env"])
        if "failures" in d:
            kw["failures"] = FailureRates(**d["failures"])
        return cls(**kw)


def smoothed(values: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-weighted mean over cloth pixels only; background stays 0."""
    if sigma <= 0:
        return values
    m = mask.astype(np.float64)
    num = gaussian_filter(values * m, sigma)
    den = gaussian_filter(m, sigma)
    return np.where(mask, num / np.maximum(den, 1e-12), 0.0)


class World:
    """Simulator handle: ground truth for one episode plus the learned components.

    ``model`` None means the geometric affordance labels rank the pixels.
    """

    def __init__(self, cfg: EpisodeConfig, classifier: tactile.GraspClassifier, model: PatchRegressor | None,
                 seed: int):
        self.cfg = cfg
        self.classifier = classifier
        self.model = model
        self.rng = np.random.default_rng([int(seed), 41])
        self.seed = int(seed)
        self.config_seed = None
        self.scene = None
        self.tried = None
        self.grasp = None
        self.steps = 0
        self.first_confirmed = None

    def _fail(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def _scene(self, rotation: int):
        env = self.cfg.env
        rot = (rotation % FULL_ROTATION) * env.rotation_increment_deg
        if self.model is None:
            return make_scene(env, self.config_seed, rot)
        mesh = make_configuration(env.cloth, self.config_seed, rot, env.rotation_increment_deg)
        img, hit = render_depth(mesh, env.camera)
        reach = reachability_mask(img, hit, mesh, mesh.positions[mesh.pinned[0]], env.reach)
        return Scene(mesh, img, hit, reach, None, {})

    def pick(self) -> str:
        if self._fail(self.cfg.failures.pick_miss):
            return "missed"
        # Highest-point sampling lands on a random spot; which one fixes the hanging shape.
        self.config_seed = int(self.rng.integers(2**31))
        return "picked"

    def corner_grasp(self, state: TaskState) -> str:
        if self._fail(self.cfg.failures.corner_drop):
            return "dropped"
        self.scene = self._scene(state.rotation)
        self.tried = np.zeros(self.scene.depth.depth.shape, dtype=bool)
        h, w = self.scene.depth.depth.shape
        expected = self.scene.depth.cloth_mask[h // 4: 3 * h // 4, w // 4: 3 * w // 4].mean() > 0.05
        if not expected or self._fail(self.cfg.failures.visual_false_negative):
            return "visual_check_failed"
        return "corner_held"

    def search(self, state: TaskState) -> tuple[str, dict]:
        if self._fail(self.cfg.failures.search_drop):
            return "dropped", {}
        if state.attempts_this_rotation >= self.cfg.attempts_per_rotation:
            return "attempts_exhausted", {}
        sc = self.scene
        mask = sc.depth.cloth_mask
        if self.model is None:
            values = sc.affordance.values
        else:
            values = smoothed(predict_map(self.model, sc.depth.depth, mask).values, mask, self.cfg.smooth_sigma)
        choice = select_grasp(values, sc.reach_mask, self.cfg.threshold, self.tried)
        if choice == ROTATE:
            return "no_grasp", {}
        r, c = choice
        k = self.cfg.exclusion_radius
        self.tried[max(r - k, 0): r + k + 1, max(c - k, 0): c + k + 1] = True
        out = grasp_attempt(sc, r, c, self.cfg.env, self.classifier, [self.seed, state.grasp_attempts, 13])
        true_edge = out.scenario.category in (tactile.Category.EDGE, tactile.Category.CORNER)
        confirmed = out.confidence >= 0.5
        if confirmed and self._fail(self.cfg.failures.tactile_false_negative):
            confirmed = False
        if self._fail(self.cfg.failures.tactile_false_positive):
            # The classifier reports an edge for what is physically a fold.
            confirmed, true_edge = True, False
        detail = {"pixel": [int(r), int(c)], "score": round(float(values[r, c]), 6),
                  "category": out.scenario.category.value,
                  "confidence": round(out.confidence, 6), "true_edge": true_edge}
        if not confirmed:
            return "rejected", detail
        self.grasp = (out.scenario, true_edge)
        if self.first_confirmed is None:
            self.first_confirmed = true_edge
        return "edge_confirmed", detail

    def rotate(self, state: TaskState) -> str:
        if state.rotation >= FULL_ROTATION:
            return "full_rotation"
        self.scene = self._scene(state.rotation)
        self.tried = np.zeros(self.scene.depth.depth.shape, dtype=bool)
        return "rotated"

    def slide(self, state: TaskState) -> tuple[str, dict]:
        scn, true_edge = self.grasp
        if not true_edge:
            return "dropped", {"reason": "not_an_edge", "traversal": 0.0}
        if self._fail(self.cfg.failures.slide_drop):
            return "dropped", {"reason": "injected", "traversal": 0.0}
        edge = "thick" if scn.thickness_mm >= self.cfg.thick_hem_mm else "thin"
        coverage = float(np.clip(scn.pose().coverage, 0.25, 1.0))
        budget = max(1, self.cfg.step_cap - self.steps)
        log = vertical_slide(SlidingPlant.vertical(edge), self.cfg.k_p, self.cfg.shear_threshold, coverage,
                             int(self.rng.integers(2**31)), max_steps=budget)
        self.steps += len(log.rows)
        detail = {"edge": edge, "coverage": round(coverage, 6), "traversal": log.traversal, "slide_steps": len(log.rows)}
        return {"corner": "corner_reached", "dropped": "dropped"}.get(log.outcome, "stalled"), detail

    def reset(self) -> str:
        self.scene = self.tried = self.grasp = None
        return "reset"


def transition(state: TaskState, condition: str) -> TaskState:
    """Apply the table plus counter bookkeeping for one observed condition."""
    key = (state.phase, condition)
    if key not in TRANSITIONS:
        raise ContractError(f"condition {condition!r} is not valid in {state.phase.value}")
    nxt = TRANSITIONS[key]
    s = replace(state, phase=nxt)
    if state.phase == P.EDGE_GRASP_SEARCH and condition in ("rejected", "edge_confirmed"):
        s = replace(s, attempts_this_rotation=state.attempts_this_rotation + 1, grasp_attempts=state.grasp_attempts + 1)
    if nxt == P.ROTATE:
        s = replace(s, rotation=min(state.rotation + 1, FULL_ROTATION), attempts_this_rotation=0)
    if nxt == P.RESTART:
        s = replace(s, restarts=state.restarts + 1)
    if state.phase == P.RESTART:
        s = replace(s, rotation=0, attempts_this_rotation=0)
    return s


ACTIONS = {
    P.PICK_FROM_GROUND: "PICK_HIGHEST",
    P.CORNER_GRASP: "GRASP_LOWEST",
    P.EDGE_GRASP_SEARCH: "GRASP_EDGE",
    P.ROTATE: "ROTATE",
    P.SLIDE: "SLIDE",
    P.RESTART: "RELEASE",
}


def step(state: TaskState, world: World, observation: str | None = None) -> tuple[Action, TaskState]:
    """One state-machine step.

    Without ``observation`` the world executes the state's action and reports
    the condition; passing one skips execution (used to drive the table).
    An edge search that finds nothing above threshold yields action ROTATE.
    """
    if state.phase in TERMINAL:
        raise ContractError("episode already finished")
    detail = {}
    if observation is None:
        ph = state.phase
        if ph == P.PICK_FROM_GROUND:
            observation = world.pick()
        elif ph == P.CORNER_GRASP:
            observation = world.corner_grasp(state)
        elif ph == P.EDGE_GRASP_SEARCH:
            observation, detail = world.search(state)
        elif ph == P.ROTATE:
            observation = world.rotate(state)
        elif ph == P.SLIDE:
            observation, detail = world.slide(state)
        else:
            observation = world.reset()
    name = ACTIONS[state.phase]
    if state.phase == P.EDGE_GRASP_SEARCH and observation in ("no_grasp", "attempts_exhausted"):
        name = ROTATE
    return Action(name, {"condition": observation, **detail}), transition(state, observation)


@dataclass
class EpisodeReport:
    seed: int
    final_state: str
    outcome: str
    actions: list
    grasp_attempts: int
    attempts_to_first_confirm: int | None
    edge_grasp_success: bool | None
    traversal: float
    restarts: int
    steps: int
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = {"version": SCHEMA_VERSION, "kind": "episode-report"}
        d.update({k: getattr(self, k) for k in self.__dataclass_fields__ if k != "wall_time"})
        return d

    def write(self, path) -> None:
        write_json(Path(path), self.to_dict())


def run_episode(cfg: EpisodeConfig, seed: int, classifier: tactile.GraspClassifier,
                model: PatchRegressor | None = None) -> EpisodeReport:
    """Drive the state machine until TwoCorners, the restart limit or the step cap."""
    t0 = time.perf_counter()
    world = World(cfg, classifier, model, seed)
    state = TaskState(seed=int(seed))
    actions = []
    first_confirm = None
    traversal = 0.0
    outcome = "timeout"
    while True:
        if state.phase in TERMINAL:
            outcome = "two_corners"
            break
        if state.phase == P.RESTART and state.restarts > cfg.max_restarts:
            outcome = "restart_limit"
            break
        if world.steps >= cfg.step_cap:
            break
        action, nxt = step(state, world)
        world.steps += 1
        actions.append({"state": state.phase.value, "action": action.name, **action.detail})
        if action.detail.get("condition") == "edge_confirmed" and first_confirm is None:
            first_confirm = nxt.grasp_attempts
        if state.phase == P.SLIDE:
            traversal = float(action.detail.get("traversal", 0.0))
        state = nxt
    final = state.phase.value if outcome != "timeout" else "timeout"
    return EpisodeReport(int(seed), final, outcome, actions, state.grasp_attempts, first_confirm,
                         world.first_confirmed, traversal, state.restarts, world.steps, time.perf_counter() - t0)


def episode_suite(cfg: EpisodeConfig, seeds, classifier, model=None) -> dict:
    """Edge-grasp success rate and attempts over episodes that confirmed an edge."""
    reports = [run_episode(cfg, s, classifier, model) for s in seeds]
    confirmed = [r for r in reports if r.edge_grasp_success is not None]
    return {
        "episodes": len(reports),
        "two_corners": sum(r.final_state == P.TWO_CORNERS.value for r in reports),
        "edge_grasp_success": float(np.mean([r.edge_grasp_success for r in confirmed])) if confirmed else 0.0,
        "mean_attempts": float(np.mean([r.attempts_to_first_confirm for r in confirmed])) if confirmed else float("inf"),
        "confirmed": len(confirmed),
        "reports": reports,
    }
