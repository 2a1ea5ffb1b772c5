"""Scenario files and the experiment runners behind the command line.

A scenario fixes everything a run depends on: robot geometry, camera,
trajectory, noise, occlusion, pipeline parameters and one integer seed from
which every random stream is derived. Runners return plain data; result
records never contain wall-clock values, which are collected separately so
that result files are reproducible byte for byte.
"""
from __future__ import annotations

import dataclasses
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from .control import (WEIGHTINGS, ControlGains, ControlTarget, SimulatedPlant, equilibrium_config,
                      random_shape_target, run_closed_loop)
from .kinematics import Bounds, RobotConfig, tip_position
from .matching import CameraModel
from .reconstruct import PipelineParams, compute_metrics, process_frame
from .refmodel import ReferenceModel, build_reference_model, load_model
from .sim import (VIEWPOINTS, DescriptorSpec, NoiseSpec, ObservedFrame, OcclusionBar, PressureMap,
                  RobotGeometry, Surface, generate_surface, load_frames, make_trajectory,
                  occlude_frame, reference_views, render_frame, viewpoint_camera)

ABLATIONS = ("multiscale", "feature-update", "hierarchical")
ABLATION_VARIANTS = (("full", ()), ("w/o multi-scale", ("multiscale",)),
                     ("w/o feature update", ("feature-update",)),
                     ("w/o hierarchical", ("hierarchical",)))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySection(_Section):
    length: float = Field(0.4, gt=0)
    radius: float = Field(0.02, gt=0)
    points_per_ring: int = Field(40, ge=3)
    rings_per_meter: float = Field(400.0, gt=0)
    tip_fraction: float = Field(0.1, ge=0, lt=1)
    body_texture: float = Field(3.0, ge=0)
    tip_texture: float = Field(6.0, ge=0)


class CameraSection(_Section):
    viewpoint: str = "front"
    distance: float = Field(0.8, gt=0)

    @field_validator("viewpoint")
    @classmethod
    def _known(cls, v):
        if v not in VIEWPOINTS:
            raise ValueError(f"unknown viewpoint {v!r}; expected one of {sorted(VIEWPOINTS)}")
        return v


class TrajectorySection(_Section):
    kind: str = "random-pressures"
    n_frames: int = Field(15, ge=2)
    n_sequences: int = Field(1, ge=1)
    dt: float = Field(1.0, gt=0)
    export_frames: bool = False

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in ("step", "ramp", "random-pressures"):
            raise ValueError(f"unknown trajectory kind {v!r}")
        return v


class NoiseSection(_Section):
    depth_std: float = Field(1e-3, ge=0)
    descriptor_std: float = Field(0.05, ge=0)
    dropout: float = Field(0.1, ge=0, lt=1)


class OcclusionSection(_Section):
    position: float = Field(0.0, ge=0, le=1)
    width: float = Field(0.0, ge=0, le=1)


class PipelineSection(_Section):
    n_sample: int = Field(2000, ge=4)
    k: int = Field(4, ge=2)
    n_views: int = Field(5, ge=1)
    view_descriptor_std: float = Field(0.05, ge=0)
    sigma_kernel: float = Field(0.2, gt=0)
    alpha: float = Field(0.1, ge=0)
    score_floor: float = 0.05
    visibility_bucket: int = Field(3, ge=1)
    splat_radius: int = Field(1, ge=0)
    splat_depth_tol: float = Field(0.01, gt=0)
    renormalize: bool = True
    # fraction of pairs in the trimmed partition fit; null for plain least squares
    robust_keep: Optional[float] = Field(0.4, gt=0, le=1)
    # inlier distance floor (m) of the trimmed fit, below the surface sample spacing
    robust_floor: float = Field(1e-3, ge=0)
    ablate: tuple[str, ...] = ()
    model: Optional[str] = None

    @field_validator("ablate", mode="before")
    @classmethod
    def _ablate(cls, v):
        if isinstance(v, str):
            v = [s for s in v.split(",") if s]
        bad = [s for s in v if s not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation flag(s) {bad}; expected a subset of {list(ABLATIONS)}")
        return tuple(sorted(set(v), key=ABLATIONS.index))


class SweepSection(_Section):
    positions: tuple[float, ...] = (0.3, 0.45, 0.7)
    widths: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    n_seeds: int = Field(20, ge=1)
    n_frames: int = Field(10, ge=2)
    viewpoints: tuple[str, ...] = ("front", "front-right", "front-left", "side-left")

    @field_validator("positions", "widths")
    @classmethod
    def _unit(cls, v):
        if any(not 0 <= x <= 1 for x in v):
            raise ValueError("positions and widths are fractions in [0, 1]")
        return v

    @field_validator("viewpoints")
    @classmethod
    def _views(cls, v):
        bad = [x for x in v if x not in VIEWPOINTS]
        if bad:
            raise ValueError(f"unknown viewpoint(s) {bad}; expected names from {sorted(VIEWPOINTS)}")
        return v


class ControlSection(_Section):
    kind: str = "shape"
    n_targets: int = Field(1, ge=1)
    n_steps: int = Field(50, ge=5)
    dt: float = Field(0.4, gt=0)
    kp: float = Field(4.0, ge=0)
    ki: float = Field(8.0, ge=0)
    u_max: float = Field(100.0, gt=0)
    weighting: str = "offset-cosine"
    time_constant: float = Field(0.5, ge=0)
    kappa_range: tuple[float, float] = (1.0, 6.0)
    targets: Optional[tuple[dict, ...]] = None

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in ("shape", "tip"):
            raise ValueError(f"unknown control kind {v!r}")
        return v

    @field_validator("weighting")
    @classmethod
    def _weighting(cls, v):
        if v not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {v!r}")
        return v


class ReplaySection(_Section):
    frames: tuple[str, ...] = ()


_SECTIONS = ("geometry", "camera", "trajectory", "noise", "occlusion", "pipeline", "sweep",
             "control", "replay")


class Scenario(BaseModel):
    """Complete, self-describing run description."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "default"
    seed: int = Field(0, ge=0, lt=2 ** 64)
    geometry: GeometrySection = GeometrySection()
    camera: CameraSection = CameraSection()
    trajectory: TrajectorySection = TrajectorySection()
    noise: NoiseSection = NoiseSection()
    occlusion: OcclusionSection = OcclusionSection()
    pipeline: PipelineSection = PipelineSection()
    sweep: SweepSection = SweepSection()
    control: ControlSection = ControlSection()
    replay: ReplaySection = ReplaySection()

    @model_validator(mode="before")
    @classmethod
    def _inline_files(cls, data: Any, info: ValidationInfo):
        """Sections given as strings are paths to JSON files, relative to the scenario."""
        if not isinstance(data, dict):
            return data
        base = Path((info.context or {}).get("base", "."))
        data = dict(data)
        for key in _SECTIONS:
            if isinstance(data.get(key), str):
                path = base / data[key]
                if not path.is_file():
                    raise ValueError(f"{key} section file not found: {path}")
                data[key] = json.loads(path.read_text())
        return data

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def with_overrides(self, seed: int | None = None, ablate: Sequence[str] | str | None = None) -> "Scenario":
        data = self.resolved()
        if seed is not None:
            data["seed"] = seed
        if ablate is not None:
            data["pipeline"]["ablate"] = ablate
        return Scenario.model_validate(data)


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return Scenario.model_validate(json.loads(path.read_text()), context={"base": path.parent})


# -- seeds -----------------------------------------------------------------

def derive_seed(seed: int, *keys) -> int:
    """Independent 32-bit seed for a named stream; strings are hashed with CRC32."""
    words = [seed & 0xFFFFFFFF, seed >> 32]
    words += [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# -- construction ----------------------------------------------------------

def make_geometry(sc: Scenario) -> RobotGeometry:
    g = sc.geometry
    return RobotGeometry(g.length, g.radius, g.points_per_ring, g.rings_per_meter, g.tip_fraction)


def make_surface(sc: Scenario) -> Surface:
    spec = DescriptorSpec(body_texture=sc.geometry.body_texture, tip_texture=sc.geometry.tip_texture)
    return generate_surface(make_geometry(sc), seed=derive_seed(sc.seed, "surface"),
                            descriptor_spec=spec)


def make_camera(sc: Scenario, viewpoint: str | None = None) -> CameraModel:
    return viewpoint_camera(viewpoint or sc.camera.viewpoint, sc.camera.distance,
                            robot_length=sc.geometry.length)


def make_noise(sc: Scenario) -> NoiseSpec:
    return NoiseSpec(sc.noise.depth_std, sc.noise.descriptor_std, sc.noise.dropout)


def make_pressure_map(sc: Scenario) -> PressureMap:
    pm = PressureMap()
    half = sc.geometry.length / 2
    return dataclasses.replace(pm, lengths=dataclasses.replace(pm.lengths, l0=(half, half)))


def build_model(sc: Scenario, surface: Surface | None = None) -> ReferenceModel:
    surface = make_surface(sc) if surface is None else surface
    p = sc.pipeline
    views = reference_views(surface, p.n_views, p.view_descriptor_std, seed=derive_seed(sc.seed, "views"))
    return build_reference_model(surface.rest_points, views, surface.rest_config, p.n_sample, p.k,
                                 seed=derive_seed(sc.seed, "fps"))


def reference_model(sc: Scenario, surface: Surface | None = None) -> ReferenceModel:
    """The scenario's model file when one is named, otherwise a fresh build."""
    if sc.pipeline.model is not None:
        return load_model(sc.pipeline.model)
    return build_model(sc, surface)


def pipeline_params(sc: Scenario, ablate: Sequence[str] | None = None) -> PipelineParams:
    p = sc.pipeline
    flags = p.ablate if ablate is None else tuple(ablate)
    return PipelineParams(sigma_kernel=p.sigma_kernel, alpha=p.alpha, score_floor=p.score_floor,
                          use_multiscale="multiscale" not in flags,
                          update_features="feature-update" not in flags,
                          hierarchical="hierarchical" not in flags,
                          renormalize=p.renormalize,
                          bounds=Bounds.around(make_geometry(sc).rest_config),
                          visibility_bucket=p.visibility_bucket, splat_radius=p.splat_radius,
                          splat_depth_tol=p.splat_depth_tol, robust_keep=p.robust_keep,
                          robust_floor=p.robust_floor)


def trajectory(sc: Scenario, index: int, n_frames: int | None = None) -> list[RobotConfig]:
    return make_trajectory(sc.trajectory.kind, n_frames or sc.trajectory.n_frames,
                           seed=derive_seed(sc.seed, "trajectory", index),
                           bounds=Bounds.around(make_geometry(sc).rest_config),
                           pressure_map=make_pressure_map(sc))


def render_sequence(sc: Scenario, surface: Surface, camera: CameraModel, index: int,
                    configs: Sequence[RobotConfig], occlusion: OcclusionBar | None = None) -> list[ObservedFrame]:
    """Frames for every configuration; the noise seed depends on sequence and frame only."""
    occ = occlusion or OcclusionBar(sc.occlusion.position, sc.occlusion.width)
    noise = make_noise(sc)
    return [render_frame(surface, c, camera, occ, noise, seed=derive_seed(sc.seed, "frame", index, i),
                         timestamp=i * sc.trajectory.dt)
            for i, c in enumerate(configs)]


# -- tracking --------------------------------------------------------------

def track_frames(model: ReferenceModel, frames: Sequence[ObservedFrame], camera: CameraModel,
                 params: PipelineParams, dt: float, length: float) -> tuple[list[dict], list[dict]]:
    """Track ``frames[1:]`` starting from the model's state at ``frames[0]``.

    Returns one deterministic record per frame and the matching timing dicts.
    """
    records, timings = [], []
    for i, frame in enumerate(frames[1:], start=1):
        r = process_frame(model, frame, camera, params, dt=dt)
        rec = r.to_dict()
        timings.append(rec.pop("timings"))
        rec = {"frame": i, **rec}
        if frame.gt_config is not None:
            m = compute_metrics(r.config, frame.gt_config, length=length)
            rec["tip_error"] = m.tip_error
            rec["shape_error"] = m.shape_error
        records.append(rec)
    return records, timings


def _summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def _timing_summary(timings: Sequence[dict]) -> dict:
    keys = sorted({k for t in timings for k in t})
    return {k: _summary([t[k] for t in timings if k in t]) for k in keys}


@lru_cache(maxsize=4)
def _context(scenario_json: str) -> tuple[Scenario, Surface, ReferenceModel]:
    """Per-process cache of the scenario's surface and reference model."""
    sc = Scenario.model_validate_json(scenario_json)
    surface = make_surface(sc)
    return sc, surface, reference_model(sc, surface)


def _parallel_map(fn: Callable, sc: Scenario, items: Sequence, jobs: int) -> list:
    args = [(sc.model_dump_json(), item) for item in items]
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, args))


def _track_one(arg) -> tuple[list[dict], list[dict], list[ObservedFrame] | None]:
    sc_json, index = arg
    sc, surface, model0 = _context(sc_json)
    camera = make_camera(sc)
    frames = render_sequence(sc, surface, camera, index, trajectory(sc, index))
    recs, tim = track_frames(model0.copy(), frames, camera, pipeline_params(sc), sc.trajectory.dt,
                             sc.geometry.length)
    for r in recs:
        r["sequence"] = index
    return recs, tim, frames if sc.trajectory.export_frames else None


@dataclasses.dataclass
class TrackReport:
    records: list[dict]
    summary: dict
    timings: dict
    frames: list[list[ObservedFrame]] | None = None

    @property
    def tracking_lost(self) -> int:
        return int(sum(r["tracking_lost"] for r in self.records))


def _track_summary(records: Sequence[dict]) -> dict:
    scored = [r for r in records if "tip_error" in r]
    return {"frames": len(records),
            "sequences": len({r.get("sequence", 0) for r in records}),
            "tracking_lost": int(sum(r["tracking_lost"] for r in records)),
            "tip_error": _summary([r["tip_error"] for r in scored]),
            "shape_error": _summary([r["shape_error"] for r in scored])}


def run_track(sc: Scenario, jobs: int = 1) -> TrackReport:
    if sc.pipeline.model is not None and not Path(sc.pipeline.model).is_file():
        raise FileNotFoundError(f"reference model file not found: {sc.pipeline.model}")
    out = _parallel_map(_track_one, sc, range(sc.trajectory.n_sequences), jobs)
    records = [r for recs, _, _ in out for r in recs]
    timings = [t for _, tim, _ in out for t in tim]
    frames = [f for _, _, f in out] if sc.trajectory.export_frames else None
    return TrackReport(records, _track_summary(records), _timing_summary(timings), frames)


def run_replay(sc: Scenario, frame_files: Sequence[str] | None = None) -> TrackReport:
    """Track recorded frame sequences; the first frame of each is the rest state."""
    files = list(frame_files if frame_files is not None else sc.replay.frames)
    if not files:
        raise ValueError("replay needs at least one frame file")
    for f in files:
        if not Path(f).is_file():
            raise FileNotFoundError(f"frame file not found: {f}")
    surface = make_surface(sc)
    model0 = reference_model(sc, surface)
    camera = make_camera(sc)
    records, timings = [], []
    for index, f in enumerate(files):
        recs, tim = track_frames(model0.copy(), load_frames(f), camera, pipeline_params(sc),
                                 sc.trajectory.dt, sc.geometry.length)
        for r in recs:
            r["sequence"] = index
        records += recs
        timings += tim
    return TrackReport(records, _track_summary(records), _timing_summary(timings))


# -- sweeps ----------------------------------------------------------------

def _occlusion_one(arg) -> np.ndarray:
    """Mean tip and shape error of one seed for every (position, width) cell."""
    sc_json, index = arg
    sc, surface, model0 = _context(sc_json)
    camera = make_camera(sc)
    configs = trajectory(sc, index, sc.sweep.n_frames)
    clean = render_sequence(sc, surface, camera, index, configs, OcclusionBar())
    params = pipeline_params(sc)
    out = np.zeros((len(sc.sweep.positions), len(sc.sweep.widths), 2))
    for a, pos in enumerate(sc.sweep.positions):
        for b, width in enumerate(sc.sweep.widths):
            bar = OcclusionBar(pos, width)
            frames = [occlude_frame(f, bar, camera.width, camera.height) for f in clean]
            recs, _ = track_frames(model0.copy(), frames, camera, params, sc.trajectory.dt,
                                   sc.geometry.length)
            out[a, b] = [np.mean([r["tip_error"] for r in recs]), np.mean([r["shape_error"] for r in recs])]
    return out


def run_sweep_occlusion(sc: Scenario, jobs: int = 1) -> list[dict]:
    """One row per (position, width) with errors averaged over ``sweep.n_seeds`` seeds.

    Every cell sees the same trajectories and noise draws, so cells differ
    only by the points the bar removes.
    """
    per_seed = np.stack(_parallel_map(_occlusion_one, sc, range(sc.sweep.n_seeds), jobs))
    rows = []
    for a, pos in enumerate(sc.sweep.positions):
        for b, width in enumerate(sc.sweep.widths):
            tip, shape = per_seed[:, a, b, 0], per_seed[:, a, b, 1]
            rows.append({"position": pos, "width": width, "mean_tip_error": float(tip.mean()),
                         "std_tip_error": float(tip.std()), "mean_shape_error": float(shape.mean()),
                         "n_seeds": int(len(tip))})
    return rows


def _viewpoint_one(arg) -> dict:
    sc_json, index = arg
    sc, surface, model0 = _context(sc_json)
    configs = trajectory(sc, index, sc.sweep.n_frames)
    params = pipeline_params(sc)
    out = {}
    for name in sc.sweep.viewpoints:
        camera = make_camera(sc, name)
        frames = render_sequence(sc, surface, camera, index, configs)
        recs, _ = track_frames(model0.copy(), frames, camera, params, sc.trajectory.dt, sc.geometry.length)
        out[name] = {"tip_error": [r["tip_error"] for r in recs],
                     "shape_error": [r["shape_error"] for r in recs],
                     "tips": [r["tip"] for r in recs]}
    return out


def run_sweep_viewpoint(sc: Scenario, jobs: int = 1) -> tuple[list[dict], dict]:
    """Per-viewpoint error rows plus an overall row, and cross-view agreement.

    Agreement is the largest pairwise distance between the tip positions
    reconstructed from different viewpoints for the final shape of each
    sequence, divided by the robot length.
    """
    per_seed = _parallel_map(_viewpoint_one, sc, range(sc.sweep.n_seeds), jobs)
    rows = []
    for name in sc.sweep.viewpoints:
        tip = [e for s in per_seed for e in s[name]["tip_error"]]
        shape = [e for s in per_seed for e in s[name]["shape_error"]]
        rows.append({"viewpoint": name, "mean_tip_error": float(np.mean(tip)),
                     "std_tip_error": float(np.std(tip)), "mean_shape_error": float(np.mean(shape))})
    means = [r["mean_tip_error"] for r in rows]
    rows.append({"viewpoint": "overall", "mean_tip_error": float(np.mean(means)),
                 "std_tip_error": float(np.std(means)),
                 "mean_shape_error": float(np.mean([r["mean_shape_error"] for r in rows]))})
    final_spread = []
    for s in per_seed:
        tips = np.array([s[name]["tips"][-1] for name in sc.sweep.viewpoints])
        d = np.linalg.norm(tips[:, None] - tips[None, :], axis=2)
        final_spread.append(float(d.max() / sc.geometry.length))
    agreement = {"max_pairwise_tip_spread": float(np.max(final_spread)),
                 "mean_pairwise_tip_spread": float(np.mean(final_spread)),
                 "viewpoint_mean_range": float(max(means) - min(means))}
    return rows, agreement


def _ablation_one(arg) -> dict:
    sc_json, index = arg
    sc, surface, model0 = _context(sc_json)
    camera = make_camera(sc)
    frames = render_sequence(sc, surface, camera, index, trajectory(sc, index))
    out = {}
    for name, flags in ABLATION_VARIANTS:
        recs, tim = track_frames(model0.copy(), frames, camera, pipeline_params(sc, flags),
                                 sc.trajectory.dt, sc.geometry.length)
        out[name] = {"tip_error": [r["tip_error"] for r in recs],
                     "shape_error": [r["shape_error"] for r in recs],
                     "lost": sum(r["tracking_lost"] for r in recs),
                     "runtime": [t["total"] for t in tim]}
    return out


def run_ablation(sc: Scenario, jobs: int = 1) -> tuple[list[dict], dict]:
    """Table-shaped rows per pipeline variant and their per-frame runtimes (s)."""
    per_seed = _parallel_map(_ablation_one, sc, range(sc.trajectory.n_sequences), jobs)
    rows, runtime = [], {}
    for name, flags in ABLATION_VARIANTS:
        tip = [e for s in per_seed for e in s[name]["tip_error"]]
        shape = [e for s in per_seed for e in s[name]["shape_error"]]
        rows.append({"variant": name, "disabled": "+".join(flags) or "none",
                     "mean_tip_error": float(np.mean(tip)), "std_tip_error": float(np.std(tip)),
                     "mean_shape_error": float(np.mean(shape)), "std_shape_error": float(np.std(shape)),
                     "tracking_lost": int(sum(s[name]["lost"] for s in per_seed))})
        runtime[name] = _summary([t for s in per_seed for t in s[name]["runtime"]])
    return rows, runtime


# -- control ---------------------------------------------------------------

def control_targets(sc: Scenario) -> list[ControlTarget]:
    c = sc.control
    if c.targets is not None:
        return [ControlTarget.from_dict(t) for t in c.targets]
    rng = np.random.default_rng(derive_seed(sc.seed, "control-targets"))
    pm = make_pressure_map(sc)
    out = []
    for _ in range(c.n_targets):
        t = random_shape_target(rng, c.kappa_range)
        if c.kind == "tip":
            t = ControlTarget.tip_target(tip_position(equilibrium_config(t, pm)).tolist())
        out.append(t)
    return out


def _control_one(arg):
    sc_json, (index, target) = arg
    sc, surface, model0 = _context(sc_json)
    c = sc.control
    plant = SimulatedPlant(surface, make_camera(sc), make_pressure_map(sc), make_noise(sc),
                           OcclusionBar(sc.occlusion.position, sc.occlusion.width), c.dt,
                           c.time_constant, derive_seed(sc.seed, "plant", index))
    gains = ControlGains(c.kp, c.ki, c.u_max, c.weighting)
    return run_closed_loop(plant, ControlTarget.from_dict(target), c.n_steps, model0.copy(),
                           pipeline_params(sc), gains)


def run_control(sc: Scenario, jobs: int = 1) -> list:
    targets = [t.to_dict() for t in control_targets(sc)]
    return _parallel_map(_control_one, sc, list(enumerate(targets)), jobs)


def finite_or_none(x: float | None):
    return None if x is None or not math.isfinite(x) else x
