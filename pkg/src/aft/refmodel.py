"""Reference model: downsampled surface points carrying structural
coordinates, partition labels and multi-scale descriptors."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import RobotConfig, backbone_frames

FORMAT_VERSION = 1
_MAGIC = b"AFTREF\x00\x00"

# A descriptor is a sequence of per-scale vectors, kept separate.
Descriptor = Sequence[np.ndarray]


class PartitionError(ValueError):
    pass


def farthest_point_sample(points, n: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    The first index is ``start`` if given, otherwise drawn from a generator
    seeded with ``seed``. Every later pick maximizes the distance to the
    already selected set; ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=float)
    m = len(pts)
    if m < 1:
        raise ValueError("farthest_point_sample needs at least one point")
    if not 1 <= n <= m:
        raise ValueError(f"cannot sample {n} of {m} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(m))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    d2[start] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
        d2[chosen[: i + 1]] = -1.0
    return chosen


# averages this close to the best count as ties, so rounding cannot reorder them
_TIE_TOL = 1e-12


def _first_best(avg: np.ndarray) -> np.ndarray:
    """Lowest index whose value is within ``_TIE_TOL`` of the row maximum."""
    return np.argmax(avg >= avg.max(axis=-1, keepdims=True) - _TIE_TOL, axis=-1)


def _unit_rows(x: np.ndarray, what: str = "descriptor") -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError(f"{what} has a zero-norm or non-finite vector")
    return x / norms


def aggregate_descriptor(views: Sequence[Descriptor]) -> list[np.ndarray]:
    """Pick, per scale, the view vector most similar on average to all views.

    The average includes each vector's similarity with itself. Ties go to
    the lowest view index.
    """
    if len(views) == 0:
        raise ValueError("aggregate_descriptor needs at least one view")
    n_scales = len(views[0])
    out = []
    for s in range(n_scales):
        F = np.array([np.asarray(v[s], dtype=float) for v in views])
        U = _unit_rows(F)
        avg = (U @ U.T).mean(axis=1)
        out.append(F[int(_first_best(avg))].copy())
    return out


def aggregate_views(view_descriptors: Sequence[Sequence[np.ndarray]],
                    mask: np.ndarray | None = None) -> list[np.ndarray]:
    """Batched :func:`aggregate_descriptor` over all points.

    ``view_descriptors[v][s]`` is an ``(N, d_s)`` array for view ``v`` and
    scale ``s``. ``mask[v, i]`` marks whether point ``i`` was seen in view
    ``v``; every point needs at least one view.
    """
    V = len(view_descriptors)
    if V == 0:
        raise ValueError("no views")
    N = len(view_descriptors[0][0])
    mask = np.ones((V, N), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any(axis=0).all():
        raise ValueError("some point is not observed in any view")
    counts = mask.sum(axis=0)
    out = []
    for s in range(len(view_descriptors[0])):
        F = np.stack([np.asarray(v[s], dtype=float) for v in view_descriptors], axis=1)  # N,V,d
        U = _unit_rows(np.where(mask.T[:, :, None], F, 1.0))
        sim = np.einsum("nvd,nwd->nvw", U, U)
        sim *= mask.T[:, None, :]
        avg = sim.sum(axis=2) / counts[:, None]
        avg[~mask.T] = -np.inf
        best = _first_best(avg)
        out.append(F[np.arange(N), best].copy())
    return out


def assign_kinematics(points, rest_config: RobotConfig, step_fraction: float = 1e-3,
                      refine_iters: int = 60) -> np.ndarray:
    """Structural coordinate of the closest rest backbone point for each point.

    Dense sampling at ``step_fraction * L`` followed by a golden-section
    refinement inside the bracketing samples.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    L = rest_config.total_length
    n = int(np.ceil(1.0 / step_fraction)) + 1
    grid = np.linspace(0.0, L, n)
    bb = backbone_frames(rest_config, grid)[0]
    best = np.empty(len(pts), dtype=np.int64)
    for lo in range(0, len(pts), 2048):
        chunk = pts[lo:lo + 2048]
        d2 = ((chunk[:, None, :] - bb[None, :, :]) ** 2).sum(axis=2)
        best[lo:lo + 2048] = np.argmin(d2, axis=1)
    a = grid[np.maximum(best - 1, 0)]
    b = grid[np.minimum(best + 1, n - 1)]

    def dist2(s):
        return np.sum((backbone_frames(rest_config, s)[0] - pts) ** 2, axis=1)

    g = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = dist2(c), dist2(d)
    for _ in range(refine_iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - g * (b - a)
        d_new = a + g * (b - a)
        # reuse the surviving interior point
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        fc_old, fd_old = fc, fd
        fc = np.where(left, dist2(c), fd_old)
        fd = np.where(left, fc_old, dist2(d))
    sigma = np.clip(0.5 * (a + b), 0.0, L)
    # the refined value must not be worse than the grid sample it started from
    grid_best = grid[best]
    worse = dist2(sigma) > dist2(grid_best)
    sigma[worse] = grid_best[worse]
    return sigma


@dataclass
class ReferenceModel:
    rest_positions: np.ndarray          # (N, 3)
    sigma: np.ndarray                   # (N,) rest arc length
    descriptors: list[np.ndarray]       # per scale (N, d_s)
    rest_config: RobotConfig
    partition: np.ndarray = None        # (N,) in [0, K)
    boundaries: np.ndarray = None       # (K+1,) arc length, 0 .. L
    base_sigma: np.ndarray = None       # (K,) partition base coordinates
    current_config: RobotConfig = None
    current_positions: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.descriptors = [np.asarray(d, dtype=float) for d in self.descriptors]
        if self.current_config is None:
            self.current_config = self.rest_config
        if self.current_positions is None:
            self.current_positions = self.rest_positions.copy()

    @property
    def n_points(self) -> int:
        return len(self.rest_positions)

    @property
    def n_partitions(self) -> int:
        return 0 if self.base_sigma is None else len(self.base_sigma)

    @property
    def scale_dims(self) -> tuple[int, ...]:
        return tuple(d.shape[1] for d in self.descriptors)

    def copy(self) -> "ReferenceModel":
        return ReferenceModel(
            self.rest_positions.copy(), self.sigma.copy(), [d.copy() for d in self.descriptors],
            self.rest_config,
            None if self.partition is None else self.partition.copy(),
            None if self.boundaries is None else self.boundaries.copy(),
            None if self.base_sigma is None else self.base_sigma.copy(),
            self.current_config, self.current_positions.copy(), dict(self.meta))

    def check_invariants(self) -> None:
        n = self.n_points
        L = self.rest_config.total_length
        assert self.sigma.shape == (n,)
        assert np.all(self.sigma >= 0) and np.all(self.sigma <= L + 1e-12)
        for d in self.descriptors:
            assert d.shape[0] == n
            assert np.all(np.linalg.norm(d, axis=1) > 0)
        if self.partition is not None:
            K = self.n_partitions
            assert K >= 2
            assert np.all(np.diff(self.boundaries) > 0)
            assert self.boundaries[0] == 0.0 and np.isclose(self.boundaries[-1], L)
            assert np.array_equal(self.partition, partition_labels(self.sigma, self.boundaries))
            assert np.all(np.bincount(self.partition, minlength=K) >= 1)


def partition_labels(sigma: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Partition index of each coordinate; interior boundaries belong to the upper span."""
    K = len(boundaries) - 1
    return np.clip(np.searchsorted(boundaries[1:-1], sigma, side="right"), 0, K - 1).astype(np.int64)


def partition_model(model: ReferenceModel, k: int) -> ReferenceModel:
    """Split the backbone into ``k`` equal arc-length spans and label points.

    Each span's base coordinate is its arc-length midpoint.
    """
    if k < 2:
        raise PartitionError(f"need at least 2 partitions, got {k}")
    L = model.rest_config.total_length
    boundaries = L * np.arange(k + 1) / k
    boundaries[-1] = L
    labels = partition_labels(model.sigma, boundaries)
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise PartitionError(f"partition {empty[0] + 1} of {k} contains no points")
    model.partition = labels
    model.boundaries = boundaries
    model.base_sigma = 0.5 * (boundaries[:-1] + boundaries[1:])
    return model


def build_reference_model(points, view_descriptors, rest_config: RobotConfig, n_sample: int,
                          k: int, seed: int = 0, view_mask=None) -> ReferenceModel:
    """FPS, then per-point view aggregation, structural coordinates and partitions."""
    pts = np.asarray(points, dtype=float)
    idx = farthest_point_sample(pts, n_sample, seed=seed)
    # keep the original ordering so the model does not depend on FPS visit order
    idx = np.sort(idx)
    views = [[np.asarray(s)[idx] for s in v] for v in view_descriptors]
    mask = None if view_mask is None else np.asarray(view_mask)[:, idx]
    desc = aggregate_views(views, mask)
    sigma = assign_kinematics(pts[idx], rest_config)
    model = ReferenceModel(pts[idx], sigma, desc, rest_config)
    model.meta["source_index"] = idx
    return partition_model(model, k)


# -- serialization ---------------------------------------------------------
#
# Little-endian layout:
#   magic        8 bytes  b"AFTREF\0\0"
#   version      uint16
#   n_points     uint32
#   n_parts      uint16   (K)
#   n_scales     uint16
#   dims         uint32 * n_scales
#   json_len     uint32   then UTF-8 JSON: rest/current config, boundaries, base_sigma
#   records      n_points * [rest xyz f64*3, current xyz f64*3, sigma f64,
#                            partition u16, descriptors f32 * sum(dims)]

def _record_dtype(dims: Sequence[int]) -> np.dtype:
    fields = [("rest", "<f8", (3,)), ("current", "<f8", (3,)), ("sigma", "<f8"), ("partition", "<u2")]
    fields += [(f"d{s}", "<f4", (d,)) for s, d in enumerate(dims)]
    return np.dtype(fields)


def model_to_bytes(model: ReferenceModel) -> bytes:
    dims = model.scale_dims
    header = json.dumps({
        "rest_config": model.rest_config.to_dict(),
        "current_config": model.current_config.to_dict(),
        "boundaries": [float(b) for b in model.boundaries],
        "base_sigma": [float(b) for b in model.base_sigma],
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HIHH", FORMAT_VERSION, model.n_points, model.n_partitions, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    rec = np.zeros(model.n_points, dtype=_record_dtype(dims))
    rec["rest"] = model.rest_positions
    rec["current"] = model.current_positions
    rec["sigma"] = model.sigma
    rec["partition"] = model.partition
    for s, d in enumerate(model.descriptors):
        rec[f"d{s}"] = d
    buf.write(rec.tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> ReferenceModel:
    if data[:8] != _MAGIC:
        raise ValueError("not a reference model file")
    off = 8
    version, n, K, S = struct.unpack_from("<HIHH", data, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported reference model version {version}")
    off += struct.calcsize("<HIHH")
    dims = struct.unpack_from(f"<{S}I", data, off)
    off += 4 * S
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    rec = np.frombuffer(data, dtype=_record_dtype(dims), count=n, offset=off)
    model = ReferenceModel(
        rec["rest"].copy(), rec["sigma"].copy(),
        [rec[f"d{s}"].astype(np.float64) for s in range(S)],
        RobotConfig.from_dict(header["rest_config"]),
        rec["partition"].astype(np.int64),
        np.array(header["boundaries"]), np.array(header["base_sigma"]),
        RobotConfig.from_dict(header["current_config"]), rec["current"].copy())
    if model.n_partitions != K:
        raise ValueError("partition count mismatch in reference model file")
    return model


def save_model(model: ReferenceModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ReferenceModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"reference model file not found: {p}")
    return model_from_bytes(p.read_bytes())
