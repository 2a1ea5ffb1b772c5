"""Synthetic RGB-D front end with ground truth.

Stands in for the camera, segmentation and feature extractor: a textured
cylinder around a PCC backbone is deformed, z-buffered, occluded and noised,
and every surviving point is reported with its 3D position, pixel and
multi-scale descriptor.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import (N_CHAMBERS, PRESSURE_RANGE, Bounds, PressureModel, RobotConfig,
                         SegmentConfig, deform_normals, deform_points, pressures_to_lengths,
                         wrap_angle)
from .matching import CameraModel, nearest_per_bucket

WORK_WIDTH, WORK_HEIGHT = 256, 192
# RealSense-like 640x480 intrinsics scaled to the working resolution
_NATIVE_FOCAL, _SCALE = 615.0, WORK_WIDTH / 640.0

VIEWPOINTS = {"front": 0.0, "front-right": -35.0, "front-left": 35.0, "side-left": 80.0}
CHAMBER_ANGLES = np.deg2rad([0.0, 120.0, 240.0])
BAR_HEIGHT = 0.06


@dataclass(frozen=True)
class RobotGeometry:
    length: float = 0.4
    radius: float = 0.02
    points_per_ring: int = 40
    rings_per_meter: float = 400.0
    tip_fraction: float = 0.1
    n_segments: int = 2

    def __post_init__(self):
        if not (self.radius > 0 and self.length > 0):
            raise ValueError("radius and length must be positive")

    @property
    def rest_config(self) -> RobotConfig:
        return RobotConfig.straight([self.length / self.n_segments] * self.n_segments)


@dataclass(frozen=True)
class DescriptorSpec:
    """Synthetic appearance: smooth random texture fields per scale.

    Each scale draws a random Fourier field over the rest surface with the
    given correlation length. Body and tip regions are offset from different
    cluster centers; the tip carries a stronger texture.
    """

    dims: tuple[int, ...] = (64, 256, 1024)
    correlation: tuple[float, ...] = (0.006, 0.02, 0.06)
    body_texture: float = 3.0
    tip_texture: float = 6.0
    n_features: int = 48


@dataclass(frozen=True)
class NoiseSpec:
    depth_std: float = 0.0
    descriptor_std: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.depth_std < 0 or self.descriptor_std < 0:
            raise ValueError("noise std must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


DEFAULT_NOISE = NoiseSpec(depth_std=1e-3, descriptor_std=0.05, dropout=0.1)


@dataclass(frozen=True)
class OcclusionBar:
    """Horizontal block: ``position`` is normalized image height of its center,
    ``width`` the fraction of image width it spans (0 disables either)."""

    position: float = 0.0
    width: float = 0.0
    height: float = BAR_HEIGHT

    def __post_init__(self):
        if not (0 <= self.position <= 1 and 0 <= self.width <= 1):
            raise ValueError("occlusion position and width must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return self.position > 0 and self.width > 0


@dataclass
class Surface:
    rest_points: np.ndarray
    normals: np.ndarray
    sigma: np.ndarray
    descriptors: list[np.ndarray]
    rest_config: RobotConfig
    tip_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.rest_points)


@dataclass
class ObservedFrame:
    positions: np.ndarray
    pixels: np.ndarray
    descriptors: list[np.ndarray]
    timestamp: float = 0.0
    gt_config: RobotConfig | None = None
    source_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, keep: np.ndarray) -> "ObservedFrame":
        return ObservedFrame(self.positions[keep], self.pixels[keep],
                             [d[keep] for d in self.descriptors], self.timestamp, self.gt_config,
                             None if self.source_index is None else self.source_index[keep])


# -- surface ---------------------------------------------------------------

def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _texture(points: np.ndarray, tip: np.ndarray, spec: DescriptorSpec,
             rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for dim, ell in zip(spec.dims, spec.correlation):
        W = rng.normal(0.0, 1.0 / ell, size=(spec.n_features, 3))
        b = rng.uniform(0.0, 2 * np.pi, size=spec.n_features)
        A = rng.normal(size=(dim, spec.n_features))
        body_c = _unit(rng.normal(size=dim))
        tip_c = _unit(rng.normal(size=dim))
        field_ = _unit(np.cos(points @ W.T + b) @ A.T)
        center = np.where(tip[:, None], tip_c, body_c)
        amp = np.where(tip, spec.tip_texture, spec.body_texture)[:, None]
        out.append(_unit(center + amp * field_))
    return out


def generate_surface(geometry: RobotGeometry = RobotGeometry(), seed: int = 0,
                     descriptor_spec: DescriptorSpec = DescriptorSpec()) -> Surface:
    """Rings of points on a cylinder around the straight rest backbone (+z)."""
    n_rings = max(1, int(round(geometry.rings_per_meter * geometry.length)))
    m = geometry.points_per_ring
    z = (np.arange(n_rings) + 0.5) * geometry.length / n_rings
    # alternate rings are staggered by half a step
    ang = (2 * np.pi / m) * (np.arange(m)[None, :] + 0.5 * (np.arange(n_rings)[:, None] % 2))
    ang = ang.ravel()
    zz = np.repeat(z, m)
    normals = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
    points = np.stack([geometry.radius * normals[:, 0], geometry.radius * normals[:, 1], zz], axis=1)
    tip = zz >= (1.0 - geometry.tip_fraction) * geometry.length
    rng = np.random.default_rng(seed)
    desc = _texture(points, tip, descriptor_spec, rng)
    return Surface(points, normals, zz.copy(), desc, geometry.rest_config, tip)


def perturb_descriptors(desc: Sequence[np.ndarray], std: float,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """Additive Gaussian noise per component, then renormalization."""
    if std == 0:
        return [d.copy() for d in desc]
    return [_unit(d + rng.normal(0.0, std, size=d.shape)) for d in desc]


def reference_views(surface: Surface, n_views: int = 5, descriptor_std: float = 0.05,
                    seed: int = 0) -> list[list[np.ndarray]]:
    """Independent noisy descriptor observations of every surface point."""
    rng = np.random.default_rng(seed)
    return [perturb_descriptors(surface.descriptors, descriptor_std, rng) for _ in range(n_views)]


# -- cameras ---------------------------------------------------------------

def look_at_camera(position, target, width: int = WORK_WIDTH, height: int = WORK_HEIGHT,
                   focal: float | None = None) -> CameraModel:
    """Camera at ``position`` aimed at ``target``; world +z points down the image."""
    position = np.asarray(position, dtype=float)
    z_c = _unit(np.asarray(target, dtype=float) - position)
    down = np.array([0.0, 0.0, 1.0])
    y_c = _unit(down - (down @ z_c) * z_c)
    x_c = np.cross(y_c, z_c)
    R = np.stack([x_c, y_c, z_c])
    f = _NATIVE_FOCAL * width / 640.0 if focal is None else focal
    return CameraModel(f, f, width / 2.0, height / 2.0, R, -R @ position, width, height)


def viewpoint_camera(name: str, distance: float = 0.8, look_at=None,
                     robot_length: float = 0.4) -> CameraModel:
    """Named viewpoint around the robot, aimed at its rest mid-point."""
    if name not in VIEWPOINTS:
        raise ValueError(f"unknown viewpoint {name!r}; choose from {sorted(VIEWPOINTS)}")
    target = np.array([0.0, 0.0, robot_length / 2]) if look_at is None else np.asarray(look_at, float)
    az = math.radians(VIEWPOINTS[name])
    pos = target + distance * np.array([math.cos(az), math.sin(az), 0.0])
    return look_at_camera(pos, target)


# -- rendering -------------------------------------------------------------

def occluded_pixels(bucket: np.ndarray, occlusion: OcclusionBar, width: int, height: int) -> np.ndarray:
    """Whether each flat pixel index lies under the bar (pixel centers tested)."""
    if not occlusion.active:
        return np.zeros(len(bucket), dtype=bool)
    row = bucket // width + 0.5
    col = bucket % width + 0.5
    half_h = 0.5 * occlusion.height * height
    center = occlusion.position * height
    in_rows = np.abs(row - center) <= half_h
    in_cols = np.abs(col - 0.5 * width) <= 0.5 * occlusion.width * width
    return in_rows & in_cols


def occlude_frame(frame: ObservedFrame, occlusion: OcclusionBar, width: int,
                  height: int) -> ObservedFrame:
    """Remove the points of an already rendered frame that fall under the bar.

    Equals rendering with the bar directly, since noise and dropout do not
    depend on the occlusion.
    """
    if not occlusion.active or len(frame) == 0:
        return frame
    flat = np.floor(frame.pixels[:, 1]).astype(np.int64) * width + np.floor(frame.pixels[:, 0]).astype(np.int64)
    return frame.subset(~occluded_pixels(flat, occlusion, width, height))


def render_frame(surface: Surface, config: RobotConfig, camera: CameraModel,
                 occlusion: OcclusionBar = OcclusionBar(), noise: NoiseSpec = NoiseSpec(),
                 seed: int = 0, timestamp: float = 0.0) -> ObservedFrame:
    """Observe the deformed surface through ``camera``.

    Back-facing points are culled and a per-pixel z-buffer keeps the nearest
    point. Noise is drawn for every geometrically visible point before the
    occlusion bar and dropout are applied, so a wider bar with the same seed
    returns a subset of the narrower bar's points.
    """
    pts = deform_points(config, surface.rest_config, surface.rest_points, surface.sigma)
    nrm = deform_normals(config, surface.rest_config, surface.normals, surface.sigma)
    pix, depth = camera.project(pts)
    bucket, ok = camera.pixel_buckets(pix, depth)
    facing = np.einsum("ij,ij->i", nrm, camera.center - pts) > 0
    vis = nearest_per_bucket(bucket, depth, ok & facing)

    rng = np.random.default_rng(seed)
    z_noise = rng.normal(0.0, noise.depth_std, size=vis.size) if noise.depth_std > 0 else np.zeros(vis.size)
    drop = rng.random(vis.size) < noise.dropout if noise.dropout > 0 else np.zeros(vis.size, bool)
    desc = perturb_descriptors([d[vis] for d in surface.descriptors], noise.descriptor_std, rng)

    keep = ~drop & ~occluded_pixels(bucket[vis], occlusion, camera.width, camera.height)
    src = vis[keep]
    uv = pix[src]
    z = depth[src] + z_noise[keep]
    if noise.depth_std == 0:
        positions = pts[src].copy()
    else:
        positions = camera.backproject(uv, z)
    # extractor output precision
    obs_desc = [d[keep].astype(np.float32) for d in desc]
    return ObservedFrame(positions, uv, obs_desc, float(timestamp), config, src)


# -- ground-truth actuation ------------------------------------------------

@dataclass(frozen=True)
class PressureMap:
    """Synthetic pressure -> configuration truth.

    Chamber ``c`` of a segment pushes the bend toward ``CHAMBER_ANGLES[c]``:
    with ``v = sum_c P_c (cos a_c, sin a_c)`` the curvature is
    ``kappa_gain * |v|`` and the bending direction ``atan2(v)``. Lengths come
    from the linear pressure model.
    """

    kappa_gain: float = 0.08
    lengths: PressureModel = PressureModel(((1.5e-4,) * 3, (1.5e-4,) * 3), (0.2, 0.2))

    def __call__(self, pressures) -> RobotConfig:
        P = np.clip(np.asarray(pressures, dtype=float), *PRESSURE_RANGE).reshape(-1, N_CHAMBERS)
        lengths, _ = pressures_to_lengths(self.lengths, P.ravel())
        segs = []
        for p, l in zip(P, lengths):
            vx, vy = p @ np.cos(CHAMBER_ANGLES), p @ np.sin(CHAMBER_ANGLES)
            mag = math.hypot(vx, vy)
            kappa = self.kappa_gain * mag
            phi = math.atan2(vy, vx) if kappa >= 1e-9 else 0.0
            segs.append(SegmentConfig(kappa, phi, l))
        return RobotConfig(tuple(segs))

    @property
    def rest_config(self) -> RobotConfig:
        return self(np.zeros(N_CHAMBERS * self.lengths.n_segments))


def sample_pressure_sets(n: int, rng: np.random.Generator, n_segments: int = 2,
                         zero_prob: float = 0.3) -> np.ndarray:
    """Chamber pressures ~ U(0, 100) kPa, each zeroed with probability ``zero_prob``."""
    lo, hi = PRESSURE_RANGE
    P = rng.uniform(lo, hi, size=(n, N_CHAMBERS * n_segments))
    P[rng.random(P.shape) < zero_prob] = 0.0
    return P


def _interp_config(a: RobotConfig, b: RobotConfig, t: float) -> RobotConfig:
    segs = []
    for sa, sb in zip(a.segments, b.segments):
        phi_a = sb.phi if sa.kappa == 0 else sa.phi
        phi_b = phi_a if sb.kappa == 0 else sb.phi
        dphi = wrap_angle(phi_b - phi_a)
        segs.append(SegmentConfig(sa.kappa + t * (sb.kappa - sa.kappa), phi_a + t * dphi,
                                  sa.length + t * (sb.length - sa.length)))
    return RobotConfig(tuple(segs))


def _clip(config: RobotConfig, bounds: Bounds | None) -> RobotConfig:
    if bounds is None or bounds.contains(config):
        return config
    return RobotConfig.from_params(bounds.project(config.to_params()))


def make_trajectory(kind: str, n_frames: int, seed: int = 0, bounds: Bounds | None = None, *,
                    start: RobotConfig | None = None, target: RobotConfig | None = None,
                    pressure_map: PressureMap = PressureMap(),
                    frames_per_set: int | None = None) -> list[RobotConfig]:
    """Configuration sequence of ``n_frames`` starting at ``start`` (rest by default).

    ``step``: target from frame 1 on. ``ramp``: linear in (kappa, phi, l).
    ``random-pressures``: pressure ramps from zero through successive random
    pressure sets, ``frames_per_set`` frames each (one set spanning the whole
    sequence by default). Missing targets are drawn from random pressures.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    n_seg = pressure_map.lengths.n_segments
    if start is None:
        start = pressure_map.rest_config
    if kind in ("step", "ramp"):
        if target is None:
            target = pressure_map(sample_pressure_sets(1, rng, n_seg)[0])
        if kind == "step":
            seq = [start] + [target] * (n_frames - 1)
        else:
            denom = max(n_frames - 1, 1)
            seq = [_interp_config(start, target, i / denom) for i in range(n_frames)]
    elif kind == "random-pressures":
        per = n_frames - 1 if frames_per_set is None else frames_per_set
        per = max(per, 1)
        n_sets = max(1, math.ceil((n_frames - 1) / per))
        sets = sample_pressure_sets(n_sets, rng, n_seg)
        prev = np.zeros(N_CHAMBERS * n_seg)
        pressures = [prev]
        for P in sets:
            for j in range(1, per + 1):
                pressures.append(prev + (j / per) * (P - prev))
            prev = P
        seq = [pressure_map(p) for p in pressures[:n_frames]]
        if n_frames > 0:
            seq[0] = start
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return [_clip(c, bounds) for c in seq]


# -- frame files -----------------------------------------------------------
#
# Sequence file, little-endian:
#   magic b"AFTSEQ\0\0", version u16, n_frames u32, then per frame:
#   timestamp f64, n_points u32, n_scales u16, dims u32 * n_scales,
#   gt_len u32 + UTF-8 JSON config (gt_len 0 when absent),
#   records n_points * [position f64*3, pixel f64*2, source i64, descriptors f32 * sum(dims)]

_SEQ_MAGIC = b"AFTSEQ\x00\x00"
_SEQ_VERSION = 2


def _frame_dtype(dims):
    fields = [("pos", "<f8", (3,)), ("pix", "<f8", (2,)), ("src", "<i8")]
    fields += [(f"d{s}", "<f4", (d,)) for s, d in enumerate(dims)]
    return np.dtype(fields)


def frames_to_bytes(frames: Sequence[ObservedFrame]) -> bytes:
    buf = io.BytesIO()
    buf.write(_SEQ_MAGIC)
    buf.write(struct.pack("<HI", _SEQ_VERSION, len(frames)))
    for f in frames:
        dims = tuple(d.shape[1] for d in f.descriptors)
        gt = b"" if f.gt_config is None else json.dumps(f.gt_config.to_dict(), sort_keys=True).encode()
        buf.write(struct.pack("<dIH", f.timestamp, len(f), len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
        buf.write(struct.pack("<I", len(gt)))
        buf.write(gt)
        rec = np.zeros(len(f), dtype=_frame_dtype(dims))
        rec["pos"] = f.positions
        rec["pix"] = f.pixels
        rec["src"] = -1 if f.source_index is None else f.source_index
        for s, d in enumerate(f.descriptors):
            rec[f"d{s}"] = d
        buf.write(rec.tobytes())
    return buf.getvalue()


def frames_from_bytes(data: bytes) -> list[ObservedFrame]:
    if data[:8] != _SEQ_MAGIC:
        raise ValueError("not a frame sequence file")
    version, n_frames = struct.unpack_from("<HI", data, 8)
    if version != _SEQ_VERSION:
        raise ValueError(f"unsupported frame file version {version}")
    off = 8 + struct.calcsize("<HI")
    frames = []
    for _ in range(n_frames):
        ts, n, S = struct.unpack_from("<dIH", data, off)
        off += struct.calcsize("<dIH")
        dims = struct.unpack_from(f"<{S}I", data, off)
        off += 4 * S
        (glen,) = struct.unpack_from("<I", data, off)
        off += 4
        gt = RobotConfig.from_dict(json.loads(data[off:off + glen])) if glen else None
        off += glen
        dt = _frame_dtype(dims)
        rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
        off += n * dt.itemsize
        frames.append(ObservedFrame(rec["pos"].copy(), rec["pix"].copy(),
                                    [rec[f"d{s}"].copy() for s in range(S)], ts, gt,
                                    rec["src"].copy()))
    return frames


def save_frames(path, frames: Sequence[ObservedFrame]) -> None:
    Path(path).write_bytes(frames_to_bytes(frames))


def load_frames(path) -> list[ObservedFrame]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"frame file not found: {p}")
    return frames_from_bytes(p.read_bytes())
