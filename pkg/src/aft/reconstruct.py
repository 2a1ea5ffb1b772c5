"""Hierarchical shape reconstruction from matched surface points.

Each partition of the reference model is treated as rigid between two
consecutive frames. Its rigid motion is estimated from matched points, the
moved partition base points become backbone targets, and a bounded
least-squares fit recovers the PCC configuration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import (Bounds, IKResult, RobotConfig, backbone_frames, backbone_points,
                         deform_points, inverse_kinematics, material_to_arclength, tip_position,
                         _solve_backbone)
from .matching import (DEFAULT_SCORE_FLOOR, CameraModel, Matching, optimal_assignment,
                       score_matrix, update_descriptors, visible_points,
                       visible_reference_points)
from .refmodel import ReferenceModel
from .sim import ObservedFrame


class InsufficientDataError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class TrackingLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def estimate_partition_transform(ref_points, obs_points,
                                 degenerate_tol: float = 1e-9) -> tuple[RigidTransform, float]:
    """Least-squares rigid transform taking ``ref_points`` onto ``obs_points``.

    Centroid alignment plus SVD of the cross-covariance, with the sign of the
    last singular direction flipped when needed to keep ``det R = +1``.
    Returns the transform and its sum of squared residuals.
    """
    A = np.asarray(ref_points, dtype=float)
    B = np.asarray(obs_points, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if len(A) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(A)}")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    sa = np.linalg.svd(A0, compute_uv=False)
    if sa[0] == 0 or sa[1] <= degenerate_tol * sa[0]:
        raise DegenerateGeometryError("reference points are collinear")
    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cb - R @ ca
    res = A @ R.T + t - B
    return RigidTransform(R, t), float(np.sum(res * res))


def _batched_kabsch(A, B):
    """Unchecked least-squares fits for stacked pair sets ``(m, k, 3)``."""
    ca, cb = A.mean(axis=1, keepdims=True), B.mean(axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(np.swapaxes(A - ca, 1, 2) @ (B - cb))
    flip = np.linalg.det(U) * np.linalg.det(Vt) < 0
    Vt[flip, -1] *= -1
    R = np.swapaxes(U @ Vt, 1, 2)
    return R, cb[:, 0] - (R @ ca[:, 0, :, None])[..., 0]


def robust_partition_transform(ref_points, obs_points, keep_fraction: float = 0.4,
                               inlier_floor: float = 1e-3, min_inliers: int = 6,
                               n_starts: int = 8, inlier_factor: float = 3.0,
                               max_steps: int = 20, seed: int = 0) -> tuple[RigidTransform, float, np.ndarray]:
    """Rigid transform that tolerates mismatched pairs.

    Least trimmed squares over the ``keep_fraction`` best pairs, found by
    concentration steps from the full fit and from seeded three-pair starts.
    Pairs within ``max(inlier_factor * scale, inlier_floor)`` of that fit are
    kept and the transform is refit on them by plain least squares. The floor
    (m) sits below the surface sample spacing, so bending between frames is
    tolerated while pairs matched to a neighbouring sample are not. With fewer
    than ``min_inliers`` inliers the plain fit over all pairs is returned.
    Returns the transform, its residual over the inliers and the inlier mask.
    """
    A = np.asarray(ref_points, dtype=float)
    B = np.asarray(obs_points, dtype=float)
    n = len(A)
    T, res = estimate_partition_transform(A, B)
    h = max(3, int(np.ceil(keep_fraction * n)))
    if h >= n:
        return T, res, np.ones(n, dtype=bool)

    rng = np.random.default_rng(seed)
    starts = np.argsort(rng.random((n_starts, n)), axis=1)[:, :3]
    R, t = _batched_kabsch(A[starts], B[starts])
    R = np.concatenate([T.rotation[None], R])
    t = np.concatenate([T.translation[None], t])
    prev = None
    for _ in range(max_steps):
        r2 = np.sum((A @ np.swapaxes(R, 1, 2) + t[:, None] - B) ** 2, axis=2)
        sub = np.sort(np.argpartition(r2, h - 1, axis=1)[:, :h], axis=1)
        if prev is not None and np.array_equal(sub, prev):
            break
        R, t = _batched_kabsch(A[sub], B[sub])
        prev = sub
    r2 = np.sum((A @ np.swapaxes(R, 1, 2) + t[:, None] - B) ** 2, axis=2)
    obj = np.sum(np.partition(r2, h - 1, axis=1)[:, :h], axis=1)
    k = int(np.argmin(obj))
    best, best_obj = RigidTransform(R[k], t[k]), float(obj[k])
    scale = np.sqrt(best_obj / h)
    inliers = np.linalg.norm(best.apply(A) - B, axis=1) <= max(inlier_factor * scale, inlier_floor)
    if inliers.sum() < min_inliers:
        return T, res, np.ones(n, dtype=bool)
    try:
        T_in, res_in = estimate_partition_transform(A[inliers], B[inliers])
    except DegenerateGeometryError:
        return T, res, np.ones(n, dtype=bool)
    return T_in, res_in, inliers


@dataclass
class PipelineParams:
    sigma_kernel: float = 0.2
    alpha: float = 0.1
    score_floor: float = DEFAULT_SCORE_FLOOR
    min_pairs: int = 3
    use_multiscale: bool = True
    update_features: bool = True
    hierarchical: bool = True
    renormalize: bool = True
    bounds: Bounds | None = None
    visibility_bucket: int = 3
    splat_radius: int = 1
    splat_depth_tol: float = 0.01
    float32_scores: bool = True
    icp_iterations: int = 30
    icp_tol: float = 1e-7
    # fraction of pairs in the trimmed partition fit; None uses plain least squares
    robust_keep: float | None = 0.4
    robust_floor: float = 1e-3

    def ablation_flags(self) -> list[str]:
        flags = []
        if not self.use_multiscale:
            flags.append("multiscale")
        if not self.update_features:
            flags.append("feature-update")
        if not self.hierarchical:
            flags.append("hierarchical")
        return flags


@dataclass
class FrameResult:
    config: RobotConfig
    transforms: dict[int, RigidTransform]
    pair_counts: list[int]
    mean_score: float
    residual: float
    tip: np.ndarray
    timings: dict[str, float]
    tracking_lost: bool = False
    converged: bool = True
    n_visible: int = 0
    n_observed: int = 0
    matching: Matching | None = field(default=None, repr=False)

    @property
    def n_pairs(self) -> int:
        return int(sum(self.pair_counts))

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "tip": [float(v) for v in self.tip],
            "residual": self.residual,
            "pair_counts": [int(c) for c in self.pair_counts],
            "mean_score": self.mean_score,
            "tracking_lost": self.tracking_lost,
            "converged": self.converged,
            "n_visible": self.n_visible,
            "n_observed": self.n_observed,
            "timings": dict(self.timings),
        }


def base_point_targets(model: ReferenceModel,
                       transforms: dict[int, RigidTransform]) -> tuple[np.ndarray, np.ndarray]:
    """Moved partition base points ``T_j(X_sigma_j)`` and their coordinates."""
    parts = sorted(transforms)
    sig = model.base_sigma[parts]
    s_cur = material_to_arclength(sig, model.rest_config.lengths, model.current_config.lengths)
    X = backbone_frames(model.current_config, s_cur)[0]
    targets = np.array([transforms[j].apply(X[k]) for k, j in enumerate(parts)])
    return sig, targets


def global_backbone_fit(model: ReferenceModel, transforms: dict[int, RigidTransform],
                        bounds: Bounds | None = None) -> IKResult:
    """Configuration whose backbone best passes through the moved base points.

    Warm-started from ``model.current_config``.
    """
    if len(transforms) < 2:
        raise TrackingLossError(f"only {len(transforms)} partition(s) resolved, need 2")
    sig, targets = base_point_targets(model, transforms)
    return inverse_kinematics(list(zip(sig, targets)), model.current_config, bounds,
                              rest_lengths=model.rest_config.lengths, restart_rms=None)


def fit_residual(model: ReferenceModel, transforms: dict[int, RigidTransform],
                 config: RobotConfig) -> float:
    sig, targets = base_point_targets(model, transforms)
    s = material_to_arclength(sig, model.rest_config.lengths, config.lengths)
    d = backbone_frames(config, s)[0] - targets
    return float(np.sum(d * d))


def direct_fit(model: ReferenceModel, matching: Matching, frame: ObservedFrame,
               camera: CameraModel, params: PipelineParams) -> IKResult:
    """Non-hierarchical baseline: ICP-style global fit on every matched point.

    Surface offsets are removed through the current local frames so each
    observed point becomes a backbone target at its reference point's
    coordinate. After every fit, observed points are re-associated with the
    closest predicted visible reference point, until the configuration stops
    moving.
    """
    rest = model.rest_config
    ref_idx = matching.ref
    obs_pts = frame.positions[matching.obs]
    t0, R0 = backbone_frames(rest, model.sigma)
    local = np.einsum("nji,nj->ni", R0, model.rest_positions - t0)
    config = model.current_config
    result = None
    for _ in range(max(1, params.icp_iterations)):
        s_cur = material_to_arclength(model.sigma[ref_idx], rest.lengths, config.lengths)
        _, R1 = backbone_frames(config, s_cur)
        targets = obs_pts - np.einsum("nij,nj->ni", R1, local[ref_idx])
        result = _solve_backbone(model.sigma[ref_idx], targets, config, params.bounds,
                                 rest.lengths, 200, 1e-10, 1e-6, None)
        moved = np.linalg.norm(result.config.to_params() - config.to_params())
        config = result.config
        if moved < params.icp_tol:
            break
        # closest-point re-association against the predicted visible surface
        pred = deform_points(config, rest, model.rest_positions, model.sigma)
        vis = visible_points(pred, camera, params.visibility_bucket, params.splat_radius,
                           params.splat_depth_tol)
        if vis.size == 0:
            break
        _, nn = cKDTree(pred[vis]).query(frame.positions)
        ref_idx = vis[nn]
        obs_pts = frame.positions
    return result


def _lost(model: ReferenceModel, timings: dict, n_vis: int, n_obs: int) -> FrameResult:
    return FrameResult(model.current_config, {}, [0] * model.n_partitions, 0.0, 0.0,
                       tip_position(model.current_config), timings, tracking_lost=True,
                       converged=False, n_visible=n_vis, n_observed=n_obs)


def process_frame(model: ReferenceModel, frame: ObservedFrame, camera: CameraModel,
                  params: PipelineParams = PipelineParams(), dt: float = 1.0) -> FrameResult:
    """Run one tracking step and update ``model`` in place.

    visibility -> scores -> assignment -> partition transforms -> global fit
    -> surface update -> descriptor update. On tracking loss the model is left
    untouched and the result is flagged.
    """
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    vis = visible_reference_points(model, camera, params.visibility_bucket, params.splat_radius,
                                   params.splat_depth_tol)
    timings["visibility"] = time.perf_counter() - t_start
    if len(frame) == 0 or vis.size == 0:
        timings["total"] = time.perf_counter() - t_start
        return _lost(model, timings, int(vis.size), len(frame))

    t = time.perf_counter()
    ref_desc = [d[vis] for d in model.descriptors]
    dtype = np.float32 if params.float32_scores else np.float64
    S = score_matrix(ref_desc, model.current_positions[vis], frame.descriptors, frame.positions,
                     params.sigma_kernel, use_descriptors=params.use_multiscale, dtype=dtype)
    timings["scores"] = time.perf_counter() - t
    t = time.perf_counter()
    matching = optimal_assignment(S, params.score_floor).remap(vis)
    timings["assignment"] = time.perf_counter() - t

    K = model.n_partitions
    labels = model.partition[matching.ref]
    pair_counts = np.bincount(labels, minlength=K).tolist()
    transforms: dict[int, RigidTransform] = {}
    t = time.perf_counter()
    try:
        if params.hierarchical:
            for j in range(K):
                sel = labels == j
                if sel.sum() < params.min_pairs:
                    continue
                try:
                    A = model.current_positions[matching.ref[sel]]
                    B = frame.positions[matching.obs[sel]]
                    if params.robust_keep is None:
                        T, _ = estimate_partition_transform(A, B)
                    else:
                        T, _, _ = robust_partition_transform(A, B, params.robust_keep, params.robust_floor,
                                                             seed=j)
                except (InsufficientDataError, DegenerateGeometryError):
                    continue
                transforms[j] = T
            timings["partitions"] = time.perf_counter() - t
            t = time.perf_counter()
            fit = global_backbone_fit(model, transforms, params.bounds)
            residual = fit.cost
        else:
            if len(matching) < 6:
                raise TrackingLossError("too few matches for the direct fit")
            fit = direct_fit(model, matching, frame, camera, params)
            residual = fit.cost
    except TrackingLossError:
        timings["total"] = time.perf_counter() - t_start
        return _lost(model, timings, int(vis.size), len(frame))
    timings["global_fit"] = time.perf_counter() - t

    t = time.perf_counter()
    config = fit.config
    model.current_config = config
    model.current_positions = deform_points(config, model.rest_config, model.rest_positions, model.sigma)
    if params.update_features:
        update_descriptors(model, matching, frame.descriptors, params.alpha, dt, params.renormalize)
    timings["update"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t_start
    return FrameResult(config, transforms, pair_counts,
                       float(matching.score.mean()) if len(matching) else 0.0,
                       residual, tip_position(config), timings, False, fit.converged,
                       int(vis.size), len(frame), matching)


@dataclass(frozen=True)
class Metrics:
    tip_error: float
    shape_error: float


def compute_metrics(estimate: RobotConfig, ground_truth: RobotConfig, n_backbone_points: int = 9,
                    length: float | None = None) -> Metrics:
    """Tip and mean backbone errors, both divided by the robot length.

    Backbone points sit at equal fractions of each configuration's own length,
    base excluded. ``length`` defaults to the ground-truth total length.
    """
    L = ground_truth.total_length if length is None else length
    tip = np.linalg.norm(tip_position(estimate) - tip_position(ground_truth)) / L
    a = backbone_points(estimate, n_backbone_points)
    b = backbone_points(ground_truth, n_backbone_points)
    shape = float(np.mean(np.linalg.norm(a - b, axis=1))) / L
    return Metrics(float(tip), shape)
