"""Synthetic cloth-sliding plant, system identification, LQR and closed-loop slides.

State convention: ``e`` is the edge position on the stationary sensor measured
from the inner (palm) edge toward the fingertip, in meters.  ``y = e_set - e``
so slip toward the fingertip lowers ``y`` and the cloth is lost once ``e``
passes the fingertip (``y < e_set - H``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import tactile
from .imageio import SCHEMA_VERSION, read_json, write_json

SENSOR_H_M = tactile.SENSOR_H_MM * 1e-3
CONTROL_DT = 1.0 / 30.0
SLIDE_Q = (100000.0, 1.0, 0.1)
SLIDE_R = 0.1


class IdentificationError(ValueError):
    pass


class RiccatiNonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SlidingPlant:
    """Hidden nonlinear plant parameters (SI units, angles in radians)."""

    mode: str = "horizontal"
    pull_speed: float = 0.04
    slip_rate: float = 0.0015
    tip_gain: float = 2.0
    c_ytheta: float = 1.0
    c_theta: float = 4.0
    theta_relax: float = 3.0
    grip_distance: float = 0.15
    friction_sat: float = 0.03
    noise_y: float = 2e-4
    noise_theta: float = 0.01
    theta_drop: float = 0.8
    phi_max: float = math.radians(30.0)
    sensor_h: float = SENSOR_H_M
    setpoint_e: float = 0.2 * SENSOR_H_M
    length: float = 0.56
    thickness_mm: float = 0.75
    hazard_rate: float = 0.0
    hazard_power: float = 4.0
    hazard_arc_power: float = 0.0
    corner_fraction: float = 0.05
    base_load: float = 0.1
    corner_load: float = 1.0

    def __post_init__(self):
        if self.mode not in ("horizontal", "vertical"):
            raise ValueError("mode must be horizontal or vertical")
        if self.pull_speed <= 0 or self.length <= 0 or self.sensor_h <= 0:
            raise ValueError("pull_speed, length and sensor_h must be positive")
        if not 0 <= self.setpoint_e < self.sensor_h:
            raise ValueError("setpoint must lie on the sensor")
        if not 0 < self.phi_max < math.pi / 2:
            raise ValueError("phi_max must lie in (0, pi/2)")

    @classmethod
    def horizontal(cls, **kw) -> "SlidingPlant":
        """Gravity pulls the cloth out sideways: strong slip toward the fingertip."""
        return cls(**kw)

    @classmethod
    def vertical(cls, edge: str = "thin", **kw) -> "SlidingPlant":
        """Cloth hangs below the grip: weaker slip; the thick hem may slip out near the tip."""
        if edge not in ("thin", "thick"):
            raise ValueError("edge must be thin or thick")
        base = dict(mode="vertical", pull_speed=0.02, slip_rate=0.0002, length=0.14,
                    setpoint_e=0.25 * SENSOR_H_M, thickness_mm=0.5, base_load=0.1)
        if edge == "thick":
            base.update(slip_rate=0.0006, thickness_mm=1.0, base_load=0.2, hazard_rate=1.5,
                        hazard_power=3.0, hazard_arc_power=2.0)
        base.update(kw)
        return cls(**base)

    def edge_position(self, y: float) -> float:
        return self.setpoint_e - y

    def slip(self, y: float) -> float:
        tip = min(max(self.edge_position(y) / self.sensor_h, 0.0), 1.0)
        return self.slip_rate * (1.0 + self.tip_gain * tip * tip)

    def hazard(self, y: float, s: float) -> float:
        if self.hazard_rate <= 0:
            return 0.0
        tip = min(max(self.edge_position(y) / self.sensor_h, 0.0), 1.0)
        arc = min(max(s / self.length, 0.0), 1.0)
        return self.hazard_rate * tip**self.hazard_power * (arc**self.hazard_arc_power if self.hazard_arc_power else 1.0)

    def tangential_load(self, s: float) -> float:
        """Shear load on the stationary gripper; the thicker corner hem ramps it up."""
        start = (1.0 - self.corner_fraction) * self.length
        ramp = max(0.0, (s - start) / (self.corner_fraction * self.length))
        return self.base_load + self.corner_load * min(ramp, 2.0) ** 2

    def holding_angle(self, state: "SlidingState") -> float:
        """Pulling angle whose direct term cancels slip and tilt drift (y held for one step)."""
        drift = self.slip(state.y) - self.pull_speed * self.c_ytheta * math.sin(state.theta)
        return state.alpha + math.asin(max(-1.0, min(1.0, drift / self.pull_speed)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SlidingState:
    y: float
    theta: float = 0.0
    alpha: float = 0.0
    s: float = 0.0
    hazard: float = 0.0
    hazard_budget: float = math.inf

    def vector(self) -> np.ndarray:
        return np.array([self.y, self.theta, self.alpha])


def state_from_coverage(plant: SlidingPlant, coverage: float, theta: float = 0.0, alpha: float = 0.0) -> SlidingState:
    """Coverage is the fraction of the sensor height holding fabric (1 = edge at the palm)."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    e = (1.0 - coverage) * plant.sensor_h
    return SlidingState(plant.setpoint_e - e, theta, alpha)


def plant_step(plant: SlidingPlant, state: SlidingState, u: float, dt: float = CONTROL_DT,
               rng: np.random.Generator | None = None):
    """One Euler step of the hidden dynamics; returns (state', event)."""
    phi = max(-plant.phi_max, min(plant.phi_max, float(u)))
    rel = math.sin(phi - state.alpha)
    v = plant.pull_speed
    ydot = v * rel + v * plant.c_ytheta * math.sin(state.theta) - plant.slip(state.y)
    ydot = max(-plant.friction_sat, min(plant.friction_sat, ydot))
    thdot = plant.c_theta * rel - plant.theta_relax * state.theta
    adot = v * rel / plant.grip_distance
    hz = state.hazard + plant.hazard(state.y, state.s) * dt
    y = state.y + ydot * dt
    th = state.theta + thdot * dt
    if rng is not None:
        ny, nt = rng.normal(size=2)
        y += plant.noise_y * math.sqrt(dt) * ny
        th += plant.noise_theta * math.sqrt(dt) * nt
    # The palm stops the edge from moving deeper than the inner sensor edge.
    y = min(y, plant.setpoint_e)
    new = SlidingState(y, th, state.alpha + adot * dt, state.s + v * math.cos(phi - state.alpha) * dt, hz,
                       state.hazard_budget)
    if plant.edge_position(y) > plant.sensor_h or abs(th) > plant.theta_drop or hz >= state.hazard_budget:
        return new, "dropped"
    if new.s >= plant.length:
        return new, "corner_reached"
    return new, "none"


# -- sensing ------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """What a controller may see: tactile estimates plus the measured gripper angle."""

    y: float
    theta: float
    alpha: float
    t: float = 0.0
    edge_visible: bool = True


def tactile_frame(plant: SlidingPlant, state: SlidingState, scenario_seed: int, frame_index: int,
                  load: float | None = None, rng: np.random.Generator | None = None) -> tactile.TactileFrame:
    e_mm = plant.edge_position(state.y) * 1e3
    scn = tactile.GraspScenario(tactile.Category.EDGE, edge_point=(0.5 * tactile.SENSOR_W_MM, e_mm),
                                edge_angle_deg=math.degrees(state.theta), thickness_mm=plant.thickness_mm,
                                seed=scenario_seed)
    frame = tactile.synth_frame(scn, 1.0, frame_index)
    if load is not None:
        frame.markers = tactile.marker_field(load, rng)
    return frame


def observe(plant: SlidingPlant, frame: tactile.TactileFrame, alpha: float, t: float = 0.0) -> Observation:
    """Turn a tactile frame into (y, theta) estimates; a lost edge reads as the nearer sensor limit."""
    pose = tactile.estimate_pose(frame)
    if pose.cls == tactile.PoseClass.EDGE:
        th = math.radians(pose.theta_deg)
        # Edge height where the fitted line crosses the sensor's center column.
        e_mm = pose.cy_mm + (0.5 * tactile.SENSOR_W_MM - pose.cx_mm) * math.tan(th)
        return Observation(plant.setpoint_e - e_mm * 1e-3, th, alpha, t)
    e = plant.sensor_h if pose.cls == tactile.PoseClass.NO_FABRIC else 0.0
    return Observation(plant.setpoint_e - e, 0.0, alpha, t, edge_visible=False)


# -- controllers -----------------------------------------------------------------------

class ZeroController:
    name = "zero"

    def __call__(self, obs: Observation) -> float:
        return 0.0


@dataclass
class ProportionalController:
    k_p: float
    name: str = "P"

    def __call__(self, obs: Observation) -> float:
        return -self.k_p * obs.y


@dataclass
class LQRController:
    K: np.ndarray
    name: str = "LQR"

    def __call__(self, obs: Observation) -> float:
        return float(-np.asarray(self.K).reshape(-1) @ np.array([obs.y, obs.theta, obs.alpha]))


# -- identification ------------------------------------------------------------

@dataclass
class RolloutData:
    X: np.ndarray
    U: np.ndarray
    Xdot: np.ndarray
    run: np.ndarray

    def __len__(self):
        return len(self.X)


def finite_difference(x: np.ndarray, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at the ends."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    return np.gradient(x, dt, axis=0, edge_order=1)


def _runs_of_true(mask: np.ndarray):
    idx = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(np.int8), [0]])))
    return [np.arange(a, b) for a, b in zip(idx[::2], idx[1::2])]


def collect_rollouts(plant: SlidingPlant, k_p: float, noise: float, n_runs: int, steps: int, seed: int = 0,
                     dt: float = CONTROL_DT, hold: int = 6) -> RolloutData:
    """Noisy proportional runs recorded through the tactile estimator.

    The uniform exploration noise is redrawn every ``hold`` steps; with
    per-step white noise the central-difference derivative would mix two
    unrelated inputs.
    """
    rng = np.random.default_rng(seed)
    Xs, Us, Ds, runs = [], [], [], []
    for r in range(n_runs):
        cov = rng.uniform(0.45, 0.9)
        st = state_from_coverage(plant, cov, theta=rng.uniform(-0.15, 0.15), alpha=rng.uniform(-0.1, 0.1))
        run_rng = np.random.default_rng([seed, r])
        scn_seed = int(rng.integers(2**31))
        xs, us, seen = [], [], []
        dither = 0.0
        for k in range(steps):
            obs = observe(plant, tactile_frame(plant, st, scn_seed, k), st.alpha)
            if noise > 0 and k % hold == 0:
                dither = rng.uniform(-noise, noise)
            phi = -k_p * obs.y + dither
            phi = max(-plant.phi_max, min(plant.phi_max, phi))
            xs.append([obs.y, obs.theta, obs.alpha])
            us.append(phi)
            seen.append(obs.edge_visible)
            st, event = plant_step(plant, st, phi, dt, run_rng)
            if event == "dropped":
                break
        # Only stretches where the estimator saw the edge carry a usable state.
        X, U, vis = np.array(xs), np.array(us)[:, None], np.array(seen)
        for seg in _runs_of_true(vis):
            if len(seg) < 3:
                continue
            Xs.append(X[seg])
            Us.append(U[seg])
            Ds.append(finite_difference(X[seg], dt))
            runs.append(np.full(len(seg), r))
    return RolloutData(np.vstack(Xs), np.vstack(Us), np.vstack(Ds), np.concatenate(runs))


@dataclass
class LinearDynamics:
    A: np.ndarray
    B: np.ndarray
    dt: float = CONTROL_DT
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(3))
    zero_residuals: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(self.A.shape[0], -1)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("dynamics must be finite")

    def discretize(self):
        """Zero-order-hold (A_d, B_d)."""
        n, m = self.B.shape
        M = np.zeros((n + m, n + m))
        M[:n, :n] = self.A
        M[:n, n:] = self.B
        E = expm(M * self.dt)
        return E[:n, :n], E[:n, n:]

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "linear-dynamics", "A": self.A.tolist(), "B": self.B.tolist(),
                "dt": self.dt, "residuals": np.asarray(self.residuals).tolist(),
                "zero_residuals": np.asarray(self.zero_residuals).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearDynamics":
        if d.get("kind") != "linear-dynamics" or d.get("version") != SCHEMA_VERSION:
            raise ValueError("not a linear-dynamics document of a supported version")
        return cls(np.array(d["A"]), np.array(d["B"]), d["dt"], np.array(d["residuals"]), np.array(d["zero_residuals"]))


STATE_NAMES = ("y", "theta", "alpha", "phi")


def fit_linear_dynamics(data: RolloutData, dt: float = CONTROL_DT, rcond: float = 1e-9) -> LinearDynamics:
    """Per-row least squares of xdot on [x, u] without intercept."""
    Z = np.hstack([data.X, data.U])
    n_par = Z.shape[1] * data.X.shape[1]
    if len(Z) < 10 * n_par:
        raise IdentificationError(f"need at least {10 * n_par} rows, got {len(Z)}")
    scale = np.linalg.norm(Z, axis=0)
    scale[scale == 0] = 1.0
    _, sv, vt = np.linalg.svd(Z / scale, full_matrices=False)
    if sv[-1] <= rcond * max(sv[0], 1e-300):
        w = vt[-1] / scale
        w /= np.abs(w).max()
        desc = ", ".join(f"{n}={c:+.3g}" for n, c in zip(STATE_NAMES, w) if abs(c) > 1e-6)
        raise IdentificationError(f"regressors are rank deficient along direction [{desc}]")
    coef, *_ = np.linalg.lstsq(Z, data.Xdot, rcond=None)
    n = data.X.shape[1]
    A = coef[:n].T
    B = coef[n:].T
    res = np.sqrt(np.mean((data.Xdot - Z @ coef) ** 2, axis=0))
    zero = np.sqrt(np.mean(data.Xdot**2, axis=0))
    return LinearDynamics(A, B, dt, res, zero)


# -- LQR ---------------------------------------------------------------------------

@dataclass
class LQRGains:
    K: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "lqr-gains", "K": self.K.tolist(), "P": self.P.tolist(),
                "Q": self.Q.tolist(), "R": self.R.tolist(), "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "LQRGains":
        if d.get("kind") != "lqr-gains" or d.get("version") != SCHEMA_VERSION:
            raise ValueError("not an lqr-gains document of a supported version")
        return cls(np.array(d["K"]), np.array(d["P"]), np.array(d["Q"]), np.array(d["R"]), d["iterations"])


def riccati_iteration(Ad, Bd, Q, R, tol: float = 1e-10, max_iter: int = 100000):
    """Fixed-point iteration of the discrete Riccati map from P = Q.

    Converged when the max-abs change falls below ``tol`` relative to max(1, |P|).
    """
    Ad = np.asarray(Ad, dtype=np.float64)
    Bd = np.asarray(Bd, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    P = Q.copy()
    for it in range(1, max_iter + 1):
        BtP = Bd.T @ P
        K = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
        Pn = Q + Ad.T @ P @ (Ad - Bd @ K)
        Pn = 0.5 * (Pn + Pn.T)
        if not np.all(np.isfinite(Pn)):
            raise RiccatiNonConvergence(f"Riccati iteration diverged at step {it}")
        delta = np.abs(Pn - P).max()
        P = Pn
        if delta < tol * max(1.0, np.abs(P).max()):
            BtP = Bd.T @ P
            return np.linalg.solve(R + BtP @ Bd, BtP @ Ad), P, it
    raise RiccatiNonConvergence(f"Riccati iteration did not converge in {max_iter} steps")


def lqr_gain(dyn: LinearDynamics, Q=SLIDE_Q, R=SLIDE_R, **kw) -> LQRGains:
    Ad, Bd = dyn.discretize()
    Qm = np.diag(Q) if np.ndim(Q) == 1 else np.asarray(Q, dtype=np.float64)
    Rm = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if np.ndim(R) == 1:
        Rm = np.diag(R)
    if not np.any(Bd):
        raise RiccatiNonConvergence("input matrix is zero; system is not stabilizable")
    K, P, it = riccati_iteration(Ad, Bd, Qm, Rm, **kw)
    return LQRGains(K, P, Qm, Rm, it)


def closed_loop_radius(dyn: LinearDynamics, K) -> float:
    Ad, Bd = dyn.discretize()
    return float(np.abs(np.linalg.eigvals(Ad - Bd @ np.atleast_2d(K))).max())


# -- episodes ------------------------------------------------------------------------

LOG_FIELDS = ("t", "y", "theta", "alpha", "phi", "shear", "event", "y_true", "theta_true", "s")


@dataclass
class EpisodeLog:
    mode: str
    controller: str
    seed: int
    init_coverage: float
    rows: list = field(default_factory=list)
    outcome: str = "running"
    traversal: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.rows)

    def summary(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "slide-episode", "mode": self.mode, "controller": self.controller,
                "seed": self.seed, "init_coverage": self.init_coverage, "outcome": self.outcome,
                "traversal": self.traversal, "steps": self.steps}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r[k] if isinstance(r[k], str) else f"{r[k]:.9g}" for k in LOG_FIELDS])

    def write(self, stem) -> None:
        stem = Path(stem)
        self.write_csv(stem.with_suffix(".csv"))
        write_json(stem.with_suffix(".json"), self.summary())


def _episode_streams(seed: int):
    ss = np.random.SeedSequence([seed, 7])
    plant_ss, marker_ss, hz_ss = ss.spawn(3)
    hz_rng = np.random.default_rng(hz_ss)
    budget = float(hz_rng.exponential(1.0))
    scn_seed = int(hz_rng.integers(2**31))
    return np.random.default_rng(plant_ss), np.random.default_rng(marker_ss), budget, scn_seed


def horizontal_slide(plant: SlidingPlant, controller, init_coverage: float, seed: int,
                     max_steps: int = 5000) -> EpisodeLog:
    """Pull the cloth through the stationary gripper until drop or the end of the workspace."""
    rng, _, budget, scn_seed = _episode_streams(seed)
    st = replace(state_from_coverage(plant, init_coverage), hazard_budget=budget)
    log = EpisodeLog("horizontal", getattr(controller, "name", type(controller).__name__), seed, init_coverage)
    for k in range(max_steps):
        t = k * CONTROL_DT
        obs = observe(plant, tactile_frame(plant, st, scn_seed, k), st.alpha, t)
        phi = max(-plant.phi_max, min(plant.phi_max, float(controller(obs))))
        nxt, event = plant_step(plant, st, phi, CONTROL_DT, rng)
        log.rows.append({"t": t, "y": obs.y, "theta": obs.theta, "alpha": st.alpha, "phi": phi, "shear": 0.0,
                         "event": event, "y_true": st.y, "theta_true": st.theta, "s": nxt.s})
        st = nxt
        if event == "dropped":
            log.outcome = "dropped"
            log.traversal = min(1.0, st.s / plant.length)
            return log
        if event == "corner_reached":
            log.outcome = "workspace_end"
            log.traversal = 1.0
            return log
    log.outcome = "timeout"
    log.traversal = min(1.0, st.s / plant.length)
    return log


def vertical_slide(plant: SlidingPlant, k_p: float, shear_threshold: float, init_coverage: float, seed: int,
                   max_steps: int = 5000) -> EpisodeLog:
    """Proportional edge following until the shear rise at the corner, or drop.

    Shear is measured against the marker field captured when the slide starts.
    A detected corner counts as full traversal.
    """
    rng, marker_rng, budget, scn_seed = _episode_streams(seed)
    controller = ProportionalController(k_p)
    st = replace(state_from_coverage(plant, init_coverage), hazard_budget=budget)
    ref = tactile_frame(plant, st, scn_seed, 0, plant.tangential_load(st.s), marker_rng)
    log = EpisodeLog("vertical", controller.name, seed, init_coverage)
    stall = 1.5 * plant.length
    for k in range(max_steps):
        t = k * CONTROL_DT
        frame = tactile_frame(plant, st, scn_seed, k, plant.tangential_load(st.s), marker_rng)
        shear = tactile.shear_signal(frame, ref)
        obs = observe(plant, frame, st.alpha, t)
        if shear > shear_threshold:
            log.rows.append({"t": t, "y": obs.y, "theta": obs.theta, "alpha": st.alpha, "phi": 0.0, "shear": shear,
                             "event": "corner_detected", "y_true": st.y, "theta_true": st.theta, "s": st.s})
            log.outcome = "corner"
            log.traversal = 1.0
            return log
        phi = max(-plant.phi_max, min(plant.phi_max, controller(obs)))
        nxt, event = plant_step(plant, st, phi, CONTROL_DT, rng)
        log.rows.append({"t": t, "y": obs.y, "theta": obs.theta, "alpha": st.alpha, "phi": phi, "shear": shear,
                         "event": event, "y_true": st.y, "theta_true": st.theta, "s": nxt.s})
        st = nxt
        if event == "dropped":
            log.outcome = "dropped"
            log.traversal = min(1.0, st.s / plant.length)
            return log
        if st.s > stall:
            break
    log.outcome = "timeout"
    log.traversal = min(1.0, st.s / plant.length)
    return log


VERTICAL_KP = 10.0
SHEAR_THRESHOLD_MM = 0.3
ROLLOUT_KP = 20.0
ROLLOUT_NOISE = 0.35


def identify_and_design(plant: SlidingPlant, n_runs: int = 30, steps: int = 256, seed: int = 0,
                        k_p: float = ROLLOUT_KP, noise: float = ROLLOUT_NOISE):
    """Collect rollouts, fit the linear model and compute the LQR gain with the default weights."""
    data = collect_rollouts(plant, k_p, noise, n_runs, steps, seed)
    dyn = fit_linear_dynamics(data)
    return data, dyn, lqr_gain(dyn)


def save_dynamics(path, dyn: LinearDynamics) -> None:
    write_json(path, dyn.to_dict())


def load_dynamics(path) -> LinearDynamics:
    return LinearDynamics.from_dict(read_json(path))
