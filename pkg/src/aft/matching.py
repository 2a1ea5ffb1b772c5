"""Per-frame correspondence between reference and observed points."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .refmodel import ReferenceModel

DEFAULT_SCORE_FLOOR = 0.05


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``rotation``/``translation`` map world to camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates ``(N, 2)`` and camera depth ``(N,)``."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def backproject(self, pixels, depth) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        z = np.asarray(depth, dtype=float)
        pc = np.stack([(pixels[:, 0] - self.cx) / self.fx * z,
                       (pixels[:, 1] - self.cy) / self.fy * z, z], axis=1)
        return (pc - self.translation) @ self.rotation

    def pixel_buckets(self, pixels: np.ndarray, depth: np.ndarray,
                      bucket_size: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Flat bucket index per point, and a mask of points in front and inside the image.

        Buckets are ``bucket_size`` x ``bucket_size`` pixel blocks; with the
        default of 1 the index is the flat pixel index ``row * width + col``.
        """
        with np.errstate(invalid="ignore"):
            col = np.floor(pixels[:, 0])
            row = np.floor(pixels[:, 1])
            ok = (depth > 0) & (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        bucket = np.full(len(depth), -1, dtype=np.int64)
        r = row[ok].astype(np.int64) // bucket_size
        c = col[ok].astype(np.int64) // bucket_size
        bucket[ok] = r * (-(-self.width // bucket_size)) + c
        return bucket, ok

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]),
                   np.array(d["translation"]), int(d["width"]), int(d["height"]))


def nearest_per_bucket(bucket: np.ndarray, depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Indices (ascending) of the smallest-depth valid point in every bucket."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return idx
    order = np.lexsort((idx, depth[idx], bucket[idx]))
    sorted_idx = idx[order]
    b = bucket[sorted_idx]
    first = np.ones(len(b), dtype=bool)
    first[1:] = b[1:] != b[:-1]
    return np.sort(sorted_idx[first])


def splat_depth(pixels: np.ndarray, depth: np.ndarray, valid: np.ndarray, camera: CameraModel,
                radius: int) -> np.ndarray:
    """Per-pixel depth buffer with every valid point drawn as a disc of ``radius`` px."""
    W, H = camera.width, camera.height
    zbuf = np.full(W * H, np.inf)
    col = np.floor(pixels[valid, 0]).astype(np.int64)
    row = np.floor(pixels[valid, 1]).astype(np.int64)
    z = depth[valid]
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr * dr + dc * dc > radius * radius:
                continue
            r, c = row + dr, col + dc
            ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            np.minimum.at(zbuf, r[ok] * W + c[ok], z[ok])
    return zbuf


def visible_points(positions, camera: CameraModel, bucket_size: int = 1, splat_radius: int = 0,
                   depth_tol: float = 0.01) -> np.ndarray:
    """Indices of points that are depth-closest within their pixel bucket.

    With ``splat_radius > 0`` points are first tested against a depth buffer
    in which every point covers a small disc, so sparse samples on a far
    surface cannot show through the gaps between samples on a near one. A
    point survives when it lies within ``depth_tol`` (m) of that buffer.
    """
    pix, depth = camera.project(positions)
    bucket, ok = camera.pixel_buckets(pix, depth, bucket_size)
    if splat_radius > 0 and ok.any():
        zbuf = splat_depth(pix, depth, ok, camera, splat_radius)
        flat = np.zeros(len(depth), dtype=np.int64)
        flat[ok] = (np.floor(pix[ok, 1]).astype(np.int64) * camera.width
                    + np.floor(pix[ok, 0]).astype(np.int64))
        ok &= depth <= zbuf[flat] + depth_tol
    return nearest_per_bucket(bucket, depth, ok)


def visible_reference_points(model: ReferenceModel, camera: CameraModel, bucket_size: int = 1,
                             splat_radius: int = 0, depth_tol: float = 0.01) -> np.ndarray:
    """Reference points that are depth-closest within their pixel bucket."""
    return visible_points(model.current_positions, camera, bucket_size, splat_radius, depth_tol)


def _stacked_units(desc: Sequence[np.ndarray], dtype) -> np.ndarray:
    """Per-scale unit vectors written side by side into one ``(n, sum(dims))`` array."""
    n = len(desc[0])
    out = np.empty((n, sum(np.shape(d)[1] for d in desc)), dtype=dtype)
    col = 0
    for d in desc:
        block = out[:, col:col + d.shape[1]]
        block[...] = d
        norm = np.sqrt(np.einsum("ij,ij->i", block, block))
        if np.any(norm == 0):
            raise ValueError("zero-norm descriptor")
        block /= norm[:, None]
        col += d.shape[1]
    return out


def multiscale_cosine(ref_desc: Sequence[np.ndarray], obs_desc: Sequence[np.ndarray],
                      dtype=np.float64) -> np.ndarray:
    """Mean per-scale cosine similarity, shape ``(n_obs, n_ref)``.

    Unit vectors of all scales are stacked side by side so the sum of
    per-scale cosines is a single matrix product.
    """
    if len(ref_desc) != len(obs_desc):
        raise ValueError("descriptor scale count mismatch")
    for r, o in zip(ref_desc, obs_desc):
        if np.shape(r)[1] != np.shape(o)[1]:
            raise ValueError("descriptor dimension mismatch")
    R = _stacked_units(ref_desc, dtype)
    O = _stacked_units(obs_desc, dtype)
    out = (O @ R.T).astype(float)
    out /= len(ref_desc)
    return out


# exp(-x) for x beyond this is denormal or zero; skipping it avoids the slow path
_EXP_CUTOFF = 708.0


def _spatial_kernel(ref_pos, obs_pos, sigma_kernel: float) -> np.ndarray:
    ref_pos = np.asarray(ref_pos, dtype=float)
    obs_pos = np.asarray(obs_pos, dtype=float)
    e = (np.sum(obs_pos ** 2, axis=1)[:, None] + np.sum(ref_pos ** 2, axis=1)[None, :]
         - 2.0 * obs_pos @ ref_pos.T)
    np.maximum(e, 0.0, out=e)
    e /= sigma_kernel * sigma_kernel
    near = e < _EXP_CUTOFF
    np.negative(e, out=e)
    return np.exp(e, out=np.zeros_like(e), where=near)


def score_matrix(ref_desc: Sequence[np.ndarray], ref_pos, obs_desc: Sequence[np.ndarray], obs_pos,
                 sigma_kernel: float, *, use_descriptors: bool = True,
                 dtype=np.float64) -> np.ndarray:
    """Matching scores ``cos_ms(f_ref, f_obs) * exp(-D^2 / sigma^2)``.

    Rows index observed points, columns reference points. With
    ``use_descriptors=False`` the cosine factor is dropped (geometry only).
    ``dtype`` sets the precision of the descriptor products.
    """
    if sigma_kernel <= 0:
        raise ValueError("kernel bandwidth must be positive")
    kernel = _spatial_kernel(ref_pos, obs_pos, sigma_kernel)
    if not use_descriptors:
        return kernel
    S = multiscale_cosine(ref_desc, obs_desc, dtype)
    S *= kernel
    return S


@dataclass
class Matching:
    """One-to-one correspondences: ``ref[k]`` matched to ``obs[k]`` with ``score[k]``."""

    ref: np.ndarray
    obs: np.ndarray
    score: np.ndarray
    unmatched_ref: np.ndarray
    unmatched_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.ref)

    @property
    def total(self) -> float:
        return math.fsum(self.score.tolist())

    def remap(self, ref_ids: np.ndarray, obs_ids: np.ndarray | None = None) -> "Matching":
        """Translate local indices through ``ref_ids`` / ``obs_ids``."""
        ref_ids = np.asarray(ref_ids)
        obs_ids = np.arange(len(self.obs) + len(self.unmatched_obs)) if obs_ids is None else np.asarray(obs_ids)
        return Matching(ref_ids[self.ref], obs_ids[self.obs], self.score,
                        ref_ids[self.unmatched_ref], obs_ids[self.unmatched_obs])


def optimal_assignment(scores, score_floor: float = DEFAULT_SCORE_FLOOR) -> Matching:
    """Maximum-weight one-to-one matching over pairs scoring above the floor.

    ``scores`` has observed points on rows and reference points on columns.
    Pairs at or below the floor (or non-positive) cannot add to the total and
    are reported unmatched.
    """
    S = np.asarray(scores, dtype=float)
    n_obs, n_ref = S.shape
    if S.size == 0:
        return Matching(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0),
                        np.arange(n_ref), np.arange(n_obs))
    if not np.all(np.isfinite(S)):
        raise ValueError("score matrix must be finite")
    cut = max(score_floor, 0.0)
    W = np.where(S > cut, S, 0.0)
    # rows and columns without a positive entry cannot change the optimum
    live_r = np.flatnonzero(W.any(axis=1))
    live_c = np.flatnonzero(W.any(axis=0))
    rows, cols = linear_sum_assignment(W[np.ix_(live_r, live_c)], maximize=True)
    rows, cols = live_r[rows], live_c[cols]
    keep = W[rows, cols] > 0
    rows, cols = rows[keep], cols[keep]
    order = np.argsort(cols, kind="stable")
    rows, cols = rows[order], cols[order]
    um_ref = np.setdiff1d(np.arange(n_ref), cols)
    um_obs = np.setdiff1d(np.arange(n_obs), rows)
    return Matching(cols.astype(np.int64), rows.astype(np.int64), S[rows, cols], um_ref, um_obs)


def update_descriptors(model: ReferenceModel, matching: Matching, obs_desc: Sequence[np.ndarray],
                       alpha: float, dt: float, renormalize: bool = True) -> float:
    """Blend matched observed descriptors into the reference descriptors.

    Uses ``f <- (1 - a) f + a f_obs`` with ``a = clamp(alpha * dt, 0, 1)``.
    ``matching.ref`` indexes model points and ``matching.obs`` rows of
    ``obs_desc``. Returns the effective rate.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    a = min(max(alpha * dt, 0.0), 1.0)
    if a == 0.0 or len(matching) == 0:
        return a
    for s, obs in enumerate(obs_desc):
        ref = model.descriptors[s]
        old = ref[matching.ref]
        blended = (1.0 - a) * old + a * np.asarray(obs)[matching.obs].astype(float)
        if renormalize:
            n = np.sqrt(np.einsum("ij,ij->i", blended, blended))
            ok = n > 0
            blended[ok] /= n[ok, None]
            blended[~ok] = old[~ok]
        ref[matching.ref] = blended
    return a


# -- exports ---------------------------------------------------------------

MATCH_CSV_HEADER = ("frame_id", "ref_index", "obs_index", "score")


def write_matching_csv(path, frames: Sequence[tuple[int, Matching]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATCH_CSV_HEADER)
        for frame_id, m in frames:
            for r, o, s in zip(m.ref.tolist(), m.obs.tolist(), m.score.tolist()):
                w.writerow((frame_id, r, o, repr(s)))


def read_matching_csv(path) -> list[tuple[int, int, int, float]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != MATCH_CSV_HEADER:
            raise ValueError("unexpected matching CSV header")
        return [(int(a), int(b), int(c), float(d)) for a, b, c, d in r]


_SCORE_MAGIC = b"AFTSCORE"


def dump_score_matrix(path, scores) -> None:
    """Binary dump: magic, rows u32, cols u32, then float32 row-major."""
    S = np.ascontiguousarray(scores, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SCORE_MAGIC)
        fh.write(struct.pack("<II", *S.shape))
        fh.write(S.tobytes())


def load_score_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != _SCORE_MAGIC:
        raise ValueError("not a score matrix dump")
    rows, cols = struct.unpack_from("<II", data, 8)
    return np.frombuffer(data, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols).copy()
