"""Closed-loop shape and tip control with reconstruction feedback.

A PI law on segment curvature sets a per-segment pressure magnitude, and an
angular weighting spreads it over the three chambers so the bend points in
the target direction. The plant is the simulator's pressure map behind a
first-order lag, observed through the renderer and tracked by the pipeline.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kinematics import (N_CHAMBERS, PRESSURE_RANGE, RobotConfig, _frames_from_params,
                         backbone_points, minimize_lm, tip_position, wrap_angle)
from .matching import CameraModel
from .reconstruct import PipelineParams, process_frame
from .refmodel import ReferenceModel
from .sim import (CHAMBER_ANGLES, NoiseSpec, ObservedFrame, OcclusionBar, PressureMap, Surface,
                  render_frame)

WEIGHTINGS = ("offset-cosine", "rectified-cosine")


@dataclass(frozen=True)
class ControlTarget:
    """Either a shape ``(kappa_1, phi_1, kappa_2, phi_2)`` or a tip position (m)."""

    kind: str
    shape: tuple[float, ...] | None = None
    tip: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("shape", "tip"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if (self.shape is None) == (self.tip is None):
            raise ValueError("exactly one of shape and tip must be given")
        if (self.kind == "shape") != (self.shape is not None):
            raise ValueError(f"{self.kind} target needs its {self.kind} field")
        if self.shape is not None:
            shape = tuple(float(v) for v in self.shape)
            if len(shape) % 2 or any(k < 0 for k in shape[0::2]):
                raise ValueError("shape target is (kappa, phi) per segment with kappa >= 0")
            object.__setattr__(self, "shape", shape)
        if self.tip is not None:
            tip = tuple(float(v) for v in self.tip)
            if len(tip) != 3:
                raise ValueError("tip target must be a 3-vector")
            object.__setattr__(self, "tip", tip)

    @classmethod
    def shape_target(cls, kappas: Sequence[float], phis: Sequence[float]) -> "ControlTarget":
        return cls("shape", shape=tuple(v for kp in zip(kappas, phis) for v in kp))

    @classmethod
    def tip_target(cls, point: Sequence[float]) -> "ControlTarget":
        return cls("tip", tip=tuple(point))

    @property
    def kappas(self) -> np.ndarray:
        return np.array(self.shape[0::2])

    @property
    def phis(self) -> np.ndarray:
        return np.array(self.shape[1::2])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": None if self.shape is None else list(self.shape),
                "tip": None if self.tip is None else list(self.tip)}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlTarget":
        return cls(d["kind"], d.get("shape"), d.get("tip"))


@dataclass(frozen=True)
class ControlGains:
    kp: float = 4.0
    ki: float = 8.0
    u_max: float = 100.0
    weighting: str = "offset-cosine"
    # curvature cap when converting a tip target, the plant's reach at u_max
    tip_kappa_max: float = 8.0

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")
        if self.kp < 0 or self.ki < 0 or self.u_max <= 0:
            raise ValueError("gains must be non-negative and u_max positive")


@dataclass
class ControllerState:
    integrator: np.ndarray
    pressures: np.ndarray
    gains: ControlGains = ControlGains()
    saturated: bool = False
    # last (kappa, phi) solution of a tip target, used to warm start the next one
    tip_guess: RobotConfig | None = None

    @classmethod
    def initial(cls, gains: ControlGains = ControlGains(), n_segments: int = 2) -> "ControllerState":
        return cls(np.zeros(n_segments), np.zeros(N_CHAMBERS * n_segments), gains)


def angular_weights(phi: float, weighting: str = "offset-cosine") -> np.ndarray:
    """Chamber weights for bending direction ``phi``.

    ``rectified-cosine`` is ``max(0, cos(phi - theta_c))``. ``offset-cosine``
    subtracts the smallest of the three cosines and scales by 2/3, so the
    chamber facing away always gets zero and the weighted chamber directions
    sum to exactly ``(cos phi, sin phi)``.
    """
    c = np.cos(phi - CHAMBER_ANGLES)
    if weighting == "rectified-cosine":
        return np.maximum(c, 0.0)
    if weighting == "offset-cosine":
        return (2.0 / 3.0) * (c - c.min())
    raise ValueError(f"unknown weighting {weighting!r}")


def tip_to_shape(estimate: RobotConfig, tip, guess: RobotConfig | None = None,
                 kappa_max: float = 20.0, regularization: float = 1e-6) -> RobotConfig:
    """Configuration reaching ``tip`` with segment lengths held at the estimate.

    One point does not fix both bends, so a small penalty
    ``regularization * |kappa|^2`` (m^2 per 1/m^2) selects the least-curved
    solution. The solve is warm-started from ``guess`` when given; otherwise
    a few bent starts are tried and the lowest objective wins.
    """
    lengths = np.asarray(estimate.lengths, dtype=float)
    n = len(lengths)
    goal = np.asarray(tip, dtype=float)

    def full(k):
        x = np.empty(3 * n)
        x[0::3], x[1::3], x[2::3] = k[0::2], k[1::2], lengths
        return x

    w = math.sqrt(regularization)

    def residual(k):
        d = _frames_from_params(full(k), np.array([lengths.sum()]), strict=False)[0][0] - goal
        return np.concatenate([d, w * k])

    def project(k):
        k = np.array(k, dtype=float).reshape(-1, 2)
        mag = np.hypot(k[:, 0], k[:, 1])
        over = mag > kappa_max
        k[over] *= (kappa_max / mag[over])[:, None]
        return k.ravel()

    if guess is not None:
        starts = [guess.to_params().reshape(-1, 3)[:, :2].ravel()]
    else:
        starts = [estimate.to_params().reshape(-1, 3)[:, :2].ravel()]
        for kappa in (0.25 * kappa_max, 0.5 * kappa_max):
            for q in range(8):
                d = [kappa * math.cos(q * math.pi / 4), kappa * math.sin(q * math.pi / 4)]
                starts.append(np.array(d * n))
    best = None
    for k0 in starts:
        res = minimize_lm(residual, project(k0), project)
        if best is None or res.cost < best.cost:
            best = res
    return RobotConfig.from_params(full(best.x))


def control_step(state: ControllerState, estimate: RobotConfig, target: ControlTarget,
                 dt: float = 1.0) -> tuple[np.ndarray, ControllerState]:
    """One PI update. Returns chamber pressures (kPa) and the new state.

    The integrator is clamped where the magnitude reaches its limit in the
    direction of the error, so it cannot wind up and never stalls short of
    the limit.
    """
    g = state.gains
    guess = state.tip_guess
    if target.kind == "tip":
        guess = tip_to_shape(estimate, target.tip, guess, g.tip_kappa_max)
        kappas = np.array([s.kappa for s in guess.segments])
        phis = np.array([s.phi for s in guess.segments])
    else:
        kappas, phis = target.kappas, target.phis
    if len(kappas) != estimate.n_segments:
        raise ValueError("target and estimate segment counts differ")

    est = np.array([s.kappa for s in estimate.segments])
    err = kappas - est
    integ = state.integrator.copy()
    pressures = np.zeros(N_CHAMBERS * len(kappas))
    saturated = False
    for i in range(len(kappas)):
        trial = integ[i] + err[i] * dt
        high = err[i] > 0 and g.kp * err[i] + g.ki * trial >= g.u_max
        if g.ki > 0:
            # integrate only up to the point where the output reaches its limit
            if high:
                trial = max(integ[i], (g.u_max - g.kp * err[i]) / g.ki)
            elif err[i] < 0 and g.kp * err[i] + g.ki * trial < 0:
                trial = min(integ[i], -g.kp * err[i] / g.ki)
        integ[i] = trial
        u_raw = g.kp * err[i] + g.ki * trial
        u = min(max(u_raw, 0.0), g.u_max)
        saturated |= high or u_raw > g.u_max
        pressures[N_CHAMBERS * i:N_CHAMBERS * (i + 1)] = u * angular_weights(phis[i], g.weighting)
    lo, hi = PRESSURE_RANGE
    clipped = np.clip(pressures, lo, hi)
    saturated |= bool(np.any(clipped != pressures))
    return clipped, ControllerState(integ, clipped, g, saturated, guess)


def equilibrium_config(target: ControlTarget, pressure_map: PressureMap = PressureMap()) -> RobotConfig:
    """Plant configuration that realizes a shape target with offset-cosine pressures."""
    if target.kind != "shape":
        raise ValueError("equilibrium is defined for shape targets")
    pressures = np.concatenate([k / pressure_map.kappa_gain * angular_weights(p)
                                for k, p in zip(target.kappas, target.phis)])
    return pressure_map(pressures)


def random_shape_target(rng: np.random.Generator, kappa_range=(1.0, 6.0),
                        n_segments: int = 2) -> ControlTarget:
    kappas = rng.uniform(*kappa_range, size=n_segments)
    phis = rng.uniform(-math.pi, math.pi, size=n_segments)
    return ControlTarget.shape_target(kappas.tolist(), [wrap_angle(p) for p in phis])


# -- plant -----------------------------------------------------------------

@dataclass
class SimulatedPlant:
    """Pressure map behind a first-order lag, observed through the renderer."""

    surface: Surface
    camera: CameraModel
    pressure_map: PressureMap = PressureMap()
    noise: NoiseSpec = NoiseSpec()
    occlusion: OcclusionBar = OcclusionBar()
    dt: float = 0.4
    time_constant: float = 0.5
    seed: int = 0
    pressures: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dt <= 0 or self.time_constant < 0:
            raise ValueError("dt must be positive and the time constant non-negative")
        if self.pressures is None:
            self.pressures = np.zeros(N_CHAMBERS * self.pressure_map.lengths.n_segments)

    @property
    def config(self) -> RobotConfig:
        return self.pressure_map(self.pressures)

    def apply(self, command) -> None:
        a = 1.0 if self.time_constant == 0 else 1.0 - math.exp(-self.dt / self.time_constant)
        self.pressures = self.pressures + a * (np.asarray(command, dtype=float) - self.pressures)

    def observe(self, step: int) -> ObservedFrame:
        seed = int(np.random.SeedSequence([self.seed, step]).generate_state(1)[0])
        return render_frame(self.surface, self.config, self.camera, self.occlusion, self.noise,
                            seed=seed, timestamp=step * self.dt)


# -- loop ------------------------------------------------------------------

def shape_error(config: RobotConfig, reference: RobotConfig, length: float, n_points: int = 8) -> float:
    """Mean distance of ``n_points`` backbone points, divided by ``length``."""
    d = backbone_points(config, n_points) - backbone_points(reference, n_points)
    return float(np.mean(np.linalg.norm(d, axis=1)) / length)


@dataclass
class TraceRow:
    step: int
    pressures: np.ndarray
    estimate: RobotConfig
    truth: RobotConfig
    shape_error: float | None
    tip_error: float
    tracking_lost: bool
    saturated: bool


@dataclass
class ControlTrace:
    target: ControlTarget
    rows: list[TraceRow]
    length: float
    reference: RobotConfig | None

    def steady_state(self, last: int = 5) -> dict:
        """Errors averaged over the final ``last`` steps."""
        tail = self.rows[-last:]
        tip = float(np.mean([r.tip_error for r in tail]))
        shape = None
        if self.reference is not None:
            shape = float(np.mean([r.shape_error for r in tail]))
        return {"shape_error": shape, "tip_error": tip,
                "saturated": bool(any(r.saturated for r in tail)),
                "tracking_lost": int(sum(r.tracking_lost for r in self.rows))}


TRACE_HEADER = (["step"] + [f"p{i}_{c}" for i in (1, 2) for c in (1, 2, 3)]
                + [f"est_{q}{i}" for i in (1, 2) for q in ("kappa", "phi", "length")]
                + [f"gt_{q}{i}" for i in (1, 2) for q in ("kappa", "phi", "length")]
                + ["shape_error", "tip_error"])


def write_trace_csv(path, trace: ControlTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace.rows:
            est = [v for s in r.estimate.segments for v in (s.kappa, s.phi, s.length)]
            gt = [v for s in r.truth.segments for v in (s.kappa, s.phi, s.length)]
            w.writerow([r.step] + [repr(float(p)) for p in r.pressures]
                       + [repr(float(v)) for v in est + gt]
                       + ["" if r.shape_error is None else repr(r.shape_error), repr(r.tip_error)])


def run_closed_loop(plant: SimulatedPlant, target: ControlTarget, n_steps: int,
                    model: ReferenceModel, params: PipelineParams = PipelineParams(),
                    gains: ControlGains = ControlGains()) -> ControlTrace:
    """Sense, estimate and actuate for ``n_steps``.

    Each row holds the command issued after observing that step, the
    estimate and the true configuration at observation time, and the true
    errors against the target. On tracking loss the last command is held.
    ``model`` is updated in place.
    """
    length = plant.pressure_map.rest_config.total_length
    reference = equilibrium_config(target, plant.pressure_map) if target.kind == "shape" else None
    goal_tip = tip_position(reference) if reference is not None else np.asarray(target.tip)
    state = ControllerState.initial(gains, plant.pressure_map.lengths.n_segments)
    rows = []
    for step in range(n_steps):
        truth = plant.config
        frame = plant.observe(step)
        result = process_frame(model, frame, plant.camera, params, dt=plant.dt)
        if result.tracking_lost:
            command = state.pressures
        else:
            command, state = control_step(state, result.config, target, plant.dt)
        rows.append(TraceRow(step, command.copy(), result.config, truth,
                             None if reference is None else shape_error(truth, reference, length),
                             float(np.linalg.norm(tip_position(truth) - goal_tip) / length),
                             result.tracking_lost, state.saturated))
        plant.apply(command)
    return ControlTrace(target, rows, length, reference)
