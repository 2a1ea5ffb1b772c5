"""Piecewise-constant-curvature (PCC) kinematics.

Each segment is a circular arc described by curvature ``kappa`` (1/m),
bending direction ``phi`` (rad) and arc length ``length`` (m). Within a
segment the frame at arc length ``s`` is

    R(s) = Rz(phi) @ Ry(kappa * s) @ Rz(-phi)

and segments compose in order, each one starting from the tip frame of the
previous one.

Internally curvature is carried as the planar vector
``(kx, ky) = kappa * (cos phi, sin phi)``. Every quantity is smooth in that
vector, including the straight limit, which keeps the solver away from the
usual ``phi`` singularity at ``kappa = 0``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# below this |kappa * s| the trigonometric ratios switch to their series
_SERIES_EPS = 1e-3
# recovered curvature below this is reported as straight with phi = 0
STRAIGHT_KAPPA = 1e-6

N_CHAMBERS = 3
PRESSURE_RANGE = (0.0, 100.0)


class DomainError(ValueError):
    """Raised when an arc-length coordinate lies outside the backbone."""


def wrap_angle(phi: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(phi, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class SegmentConfig:
    kappa: float
    phi: float
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"segment length must be positive, got {self.length}")
        if not self.kappa >= 0:
            raise ValueError(f"curvature must be non-negative, got {self.kappa}")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "phi", wrap_angle(float(self.phi)))


@dataclass(frozen=True)
class RobotConfig:
    """Ordered list of PCC segments, base first."""

    segments: tuple[SegmentConfig, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("a robot needs at least one segment")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def from_tuples(cls, values: Iterable[Sequence[float]]) -> "RobotConfig":
        return cls(tuple(SegmentConfig(*v) for v in values))

    @classmethod
    def straight(cls, lengths: Sequence[float]) -> "RobotConfig":
        return cls(tuple(SegmentConfig(0.0, 0.0, l) for l in lengths))

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.segments])

    @property
    def total_length(self) -> float:
        return float(sum(s.length for s in self.segments))

    def to_params(self) -> np.ndarray:
        """Flat ``[kx, ky, l] * n_segments`` vector."""
        out = np.empty(3 * self.n_segments)
        for i, s in enumerate(self.segments):
            out[3 * i] = s.kappa * math.cos(s.phi)
            out[3 * i + 1] = s.kappa * math.sin(s.phi)
            out[3 * i + 2] = s.length
        return out

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "RobotConfig":
        p = np.asarray(params, dtype=float).reshape(-1, 3)
        segs = []
        for kx, ky, l in p:
            kappa = math.hypot(kx, ky)
            phi = math.atan2(ky, kx) if kappa >= STRAIGHT_KAPPA else 0.0
            segs.append(SegmentConfig(kappa, phi, l))
        return cls(tuple(segs))

    def to_dict(self) -> dict:
        return {"segments": [{"kappa": s.kappa, "phi": s.phi, "length": s.length}
                             for s in self.segments]}

    @classmethod
    def from_dict(cls, data: dict) -> "RobotConfig":
        return cls(tuple(SegmentConfig(d["kappa"], d["phi"], d["length"])
                         for d in data["segments"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RobotConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BackbonePose:
    position: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class Bounds:
    """Feasible configuration domain W.

    Curvature magnitude is limited to ``[kappa_min, kappa_max]`` and each
    segment length to ``[length_lo[i], length_hi[i]]``; phi is unconstrained.
    """

    kappa_max: float = 20.0
    kappa_min: float = 0.0
    length_lo: tuple[float, ...] = ()
    length_hi: tuple[float, ...] = ()

    @classmethod
    def around(cls, nominal: RobotConfig | Sequence[float], lo: float = 0.9, hi: float = 1.3,
               kappa_max: float = 20.0) -> "Bounds":
        lengths = nominal.lengths if isinstance(nominal, RobotConfig) else np.asarray(nominal)
        return cls(kappa_max=kappa_max,
                   length_lo=tuple(float(lo * l) for l in lengths),
                   length_hi=tuple(float(hi * l) for l in lengths))

    def with_fixed_lengths(self, lengths: Sequence[float]) -> "Bounds":
        fixed = tuple(float(l) for l in lengths)
        return Bounds(self.kappa_max, self.kappa_min, fixed, fixed)

    def project(self, params: np.ndarray) -> np.ndarray:
        p = np.array(params, dtype=float).reshape(-1, 3)
        k = np.hypot(p[:, 0], p[:, 1])
        over = k > self.kappa_max
        p[over, :2] *= (self.kappa_max / k[over])[:, None]
        if self.kappa_min > 0:
            under = (k < self.kappa_min) & (k > 0)
            p[under, :2] *= (self.kappa_min / k[under])[:, None]
        if self.length_lo:
            p[:, 2] = np.clip(p[:, 2], self.length_lo, self.length_hi)
        return p.ravel()

    def contains(self, config: RobotConfig, tol: float = 1e-12) -> bool:
        for i, s in enumerate(config.segments):
            if s.kappa > self.kappa_max + tol or s.kappa < self.kappa_min - tol:
                return False
            if self.length_lo and not (self.length_lo[i] - tol <= s.length <= self.length_hi[i] + tol):
                return False
        return True


# -- arc primitives --------------------------------------------------------

def _sinc(x: np.ndarray) -> np.ndarray:
    """sin(x)/x, smooth through 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < _SERIES_EPS
    xs = x[small] ** 2
    out[small] = 1.0 - xs / 6.0 + xs * xs / 120.0
    xl = x[~small]
    out[~small] = np.sin(xl) / xl
    return out


def _cosc(x: np.ndarray) -> np.ndarray:
    """(1 - cos x)/x**2, smooth through 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < _SERIES_EPS
    xs = x[small] ** 2
    out[small] = 0.5 - xs / 24.0 + xs * xs / 720.0
    xl = x[~small]
    # 2 sin^2(x/2) avoids cancellation in 1 - cos x
    out[~small] = 2.0 * np.sin(0.5 * xl) ** 2 / (xl * xl)
    return out


def _arc_local(kx: float, ky: float, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions (M,3) and rotations (M,3,3) along one arc at local lengths s."""
    kappa = math.hypot(kx, ky)
    s = np.asarray(s, dtype=float)
    theta = kappa * s
    sc = _sinc(theta)
    cc = _cosc(theta)
    s2cc = s * s * cc
    pos = np.stack([s2cc * kx, s2cc * ky, s * sc], axis=-1)
    # Rodrigues with w = (-ky, kx, 0): R = I + s*sinc*[w]x + s^2*cosc*[w]x^2
    W = np.array([[0.0, 0.0, kx], [0.0, 0.0, ky], [-kx, -ky, 0.0]])
    W2 = W @ W
    rot = np.eye(3) + (s * sc)[:, None, None] * W + s2cc[:, None, None] * W2
    return pos, rot


def _frames_from_params(params: np.ndarray, sigma: np.ndarray,
                        strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(params, dtype=float).reshape(-1, 3)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    lengths = p[:, 2]
    ends = np.cumsum(lengths)
    total = ends[-1]
    tol = 1e-12 * max(total, 1.0)
    if strict and (np.any(sigma < -tol) or np.any(sigma > total + tol) or not np.all(np.isfinite(sigma))):
        raise DomainError(f"arc-length coordinate outside [0, {total:.6g}]")
    sigma = np.clip(sigma, 0.0, total)
    seg = np.minimum(np.searchsorted(ends, sigma, side="left"), len(p) - 1)

    positions = np.empty((sigma.size, 3))
    rotations = np.empty((sigma.size, 3, 3))
    base_t = np.zeros(3)
    base_R = np.eye(3)
    start = 0.0
    for i, (kx, ky, l) in enumerate(p):
        mask = seg == i
        if mask.any():
            lp, lr = _arc_local(kx, ky, sigma[mask] - start)
            positions[mask] = base_t + lp @ base_R.T
            rotations[mask] = base_R @ lr
        ep, er = _arc_local(kx, ky, np.array([l]))
        base_t = base_t + base_R @ ep[0]
        base_R = base_R @ er[0]
        start += l
    return positions, rotations


# -- public kinematics -----------------------------------------------------

def backbone_frames(config: RobotConfig, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized forward kinematics at arc lengths ``sigma`` (current config).

    Returns positions ``(M, 3)`` and rotations ``(M, 3, 3)``.
    """
    return _frames_from_params(config.to_params(), sigma)


def forward_kinematics(config: RobotConfig, sigma: float) -> BackbonePose:
    """Pose of the backbone point at arc length ``sigma``."""
    pos, rot = backbone_frames(config, [sigma])
    return BackbonePose(pos[0], rot[0])


def backbone_points(config: RobotConfig, n: int) -> np.ndarray:
    """``n`` equally spaced backbone points, excluding the base."""
    s = config.total_length * np.arange(1, n + 1) / n
    return backbone_frames(config, s)[0]


def tip_position(config: RobotConfig) -> np.ndarray:
    return backbone_frames(config, [config.total_length])[0][0]


def material_to_arclength(sigma, ref_lengths: Sequence[float], lengths: Sequence[float]) -> np.ndarray:
    """Map material coordinates laid out on ``ref_lengths`` onto ``lengths``.

    Each coordinate keeps its fractional position inside its own segment, so a
    cross-section stays attached to the same material when a segment stretches.
    """
    ref = np.asarray(ref_lengths, dtype=float)
    cur = np.asarray(lengths, dtype=float)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    ref_ends = np.cumsum(ref)
    ref_starts = ref_ends - ref
    cur_starts = np.cumsum(cur) - cur
    seg = np.minimum(np.searchsorted(ref_ends, sigma, side="left"), len(ref) - 1)
    return cur_starts[seg] + (sigma - ref_starts[seg]) * (cur[seg] / ref[seg])


def deform_points(config: RobotConfig, rest_config: RobotConfig, rest_points: np.ndarray,
                  sigma) -> np.ndarray:
    """Surface point kinematics for many points at once.

    ``sigma`` holds rest arc lengths. The offset of each point from its rest
    backbone frame is carried into the deformed frame::

        p = t(xi, s) + R(xi, s) @ R(xi0, s).T @ (p0 - t(xi0, s))

    For a straight rest configuration ``R(xi0, s)`` is the identity.
    """
    rest_points = np.atleast_2d(np.asarray(rest_points, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    t0, R0 = backbone_frames(rest_config, sigma)
    s_cur = material_to_arclength(sigma, rest_config.lengths, config.lengths)
    t1, R1 = backbone_frames(config, s_cur)
    local = np.einsum("nji,nj->ni", R0, rest_points - t0)
    return t1 + np.einsum("nij,nj->ni", R1, local)


def surface_point_position(config: RobotConfig, rest_config: RobotConfig, rest_point,
                           sigma: float) -> np.ndarray:
    return deform_points(config, rest_config, np.asarray(rest_point)[None, :], [sigma])[0]


def deform_normals(config: RobotConfig, rest_config: RobotConfig, rest_normals: np.ndarray,
                   sigma) -> np.ndarray:
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    _, R0 = backbone_frames(rest_config, sigma)
    s_cur = material_to_arclength(sigma, rest_config.lengths, config.lengths)
    _, R1 = backbone_frames(config, s_cur)
    local = np.einsum("nji,nj->ni", R0, rest_normals)
    return np.einsum("nij,nj->ni", R1, local)


# -- inverse kinematics ----------------------------------------------------

@dataclass
class IKResult:
    config: RobotConfig
    cost: float
    converged: bool
    iterations: int
    history: list[float] = field(default_factory=list)

    @property
    def residual_norm(self) -> float:
        return math.sqrt(self.cost)


def inverse_kinematics(targets: Sequence[tuple[float, Sequence[float]]], initial: RobotConfig,
                       bounds: Bounds | None = None, *, rest_lengths: Sequence[float] | None = None,
                       max_iter: int = 200, tol: float = 1e-10, fd_step: float = 1e-6,
                       restart_rms: float | None = 5e-3) -> IKResult:
    """Fit a configuration to backbone target positions.

    Minimizes ``sum_j ||p_j - t(xi, s_j)||^2`` over ``bounds`` with a projected
    Levenberg-Marquardt iteration and a forward-difference Jacobian.

    ``targets`` are ``(sigma, position)`` pairs where ``sigma`` is a material
    coordinate laid out on ``rest_lengths`` (default: the initial lengths).
    Iteration stops once an accepted step changes the residual norm by less
    than ``tol``. ``history`` records the cost after every accepted step and
    is non-increasing.

    If the final RMS target error exceeds ``restart_rms`` the solve is
    repeated from a fixed set of bent starting shapes and the best result is
    kept; pass ``None`` to disable.
    """
    if len(targets) == 0:
        raise ValueError("inverse_kinematics needs at least one target")
    sig = np.array([t[0] for t in targets], dtype=float)
    pts = np.array([t[1] for t in targets], dtype=float).reshape(-1, 3)
    return _solve_backbone(sig, pts, initial, bounds, rest_lengths, max_iter, tol, fd_step,
                           restart_rms)


def _restart_seeds(initial: RobotConfig, bounds: Bounds | None) -> list[np.ndarray]:
    kmax = bounds.kappa_max if bounds is not None else 20.0
    seeds = []
    base = initial.to_params().reshape(-1, 3)
    n = len(base)
    for kappa in (0.25 * kmax, 0.5 * kmax):
        for phis in np.ndindex(*(4,) * n):
            x = base.copy()
            for i, q in enumerate(phis):
                phi = q * np.pi / 2
                x[i, :2] = kappa * np.cos(phi), kappa * np.sin(phi)
            seeds.append(x.ravel())
    return seeds


def _solve_backbone(sig, pts, initial, bounds, rest_lengths, max_iter, tol, fd_step,
                    restart_rms=None) -> IKResult:
    ref = initial.lengths if rest_lengths is None else np.asarray(rest_lengths, dtype=float)
    if len(ref) != initial.n_segments:
        raise ValueError("rest_lengths does not match the number of segments")
    if np.any(sig < 0) or np.any(sig > ref.sum() * (1 + 1e-12)):
        raise DomainError("target coordinate outside the backbone")

    def residual(x):
        s = material_to_arclength(sig, ref, x[2::3])
        return (_frames_from_params(x, s, strict=False)[0] - pts).ravel()

    project = bounds.project if bounds is not None else (lambda x: np.asarray(x, dtype=float))
    best = levenberg_marquardt(residual, project(initial.to_params()), project,
                               max_iter=max_iter, tol=tol, fd_step=fd_step)
    if restart_rms is None or best.cost <= restart_rms ** 2 * len(pts):
        return best
    for x0 in _restart_seeds(initial, bounds):
        res = levenberg_marquardt(residual, project(x0), project,
                                  max_iter=max_iter, tol=tol, fd_step=fd_step)
        if res.cost < best.cost:
            best = res
            if best.cost <= (0.01 * restart_rms) ** 2 * len(pts):
                break
    return best


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    converged: bool
    iterations: int
    history: list[float]


def levenberg_marquardt(residual, x0: np.ndarray, project, *, max_iter: int = 200,
                        tol: float = 1e-10, fd_step: float = 1e-6,
                        lam0: float = 1e-3) -> IKResult:
    """Projected damped least squares over stacked segment parameters."""
    res = minimize_lm(residual, x0, project, max_iter=max_iter, tol=tol, fd_step=fd_step, lam0=lam0)
    return IKResult(RobotConfig.from_params(res.x), res.cost, res.converged, res.iterations, res.history)


def minimize_lm(residual, x0: np.ndarray, project, *, max_iter: int = 200,
                tol: float = 1e-10, fd_step: float = 1e-6, lam0: float = 1e-3) -> LMResult:
    """Projected damped least squares on a generic residual function.

    The Jacobian is a forward difference with step ``fd_step``. Stops when an
    accepted step lowers the residual norm by less than ``tol``.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    converged = False
    it = 0
    n = x.size
    for it in range(1, max_iter + 1):
        if cost < 1e-30:
            converged = True
            break
        J = np.empty((r.size, n))
        for k in range(n):
            xp = x.copy()
            xp[k] += fd_step
            J[:, k] = (residual(xp) - r) / fd_step
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12)
        accepted = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = project(x + step)
            r_new = residual(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            # no descent direction left at this damping: treat as stationary
            converged = True
            break
        change = math.sqrt(cost) - math.sqrt(cost_new)
        moved = np.linalg.norm(x_new - x)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if change < tol or moved < 1e-14 * (1.0 + np.linalg.norm(x)):
            converged = True
            break
    return LMResult(x, cost, converged, it, history)


# -- pressure to length ----------------------------------------------------

@dataclass(frozen=True)
class PressureModel:
    """Per-segment linear map ``l_i = k_i . P_i + l0_i`` (k in m/kPa)."""

    k: tuple[tuple[float, ...], ...]
    l0: tuple[float, ...]

    def __post_init__(self):
        k = tuple(tuple(float(v) for v in row) for row in self.k)
        l0 = tuple(float(v) for v in self.l0)
        if len(k) != len(l0) or any(len(row) != N_CHAMBERS for row in k):
            raise ValueError("pressure model needs one 3-vector k and one l0 per segment")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "l0", l0)
        lo, hi = PRESSURE_RANGE
        for i, row in enumerate(k):
            # linear in P, so the extreme is at a corner of the box
            worst = l0[i] + sum(min(c * lo, c * hi) for c in row)
            if worst <= 0:
                raise ValueError(f"segment {i + 1}: predicted length not positive over the pressure box")

    @property
    def n_segments(self) -> int:
        return len(self.l0)

    def to_dict(self) -> dict:
        return {"pressure_model": [{"k": list(k), "l0": l0} for k, l0 in zip(self.k, self.l0)]}

    @classmethod
    def from_dict(cls, data: dict) -> "PressureModel":
        rows = data["pressure_model"]
        return cls(tuple(tuple(r["k"]) for r in rows), tuple(r["l0"] for r in rows))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PressureModel":
        return cls.from_dict(json.loads(text))


def clamp_pressures(pressures) -> tuple[np.ndarray, bool]:
    p = np.asarray(pressures, dtype=float)
    clamped = np.clip(p, *PRESSURE_RANGE)
    return clamped, bool(np.any(clamped != p))


def pressures_to_lengths(model: PressureModel, pressures) -> tuple[np.ndarray, bool]:
    """Segment lengths for a chamber pressure vector (kPa).

    Returns ``(lengths, clamped)``; ``clamped`` is set when some pressure lay
    outside [0, 100] kPa and was clipped before evaluation.
    """
    p = np.asarray(pressures, dtype=float)
    if p.size != N_CHAMBERS * model.n_segments:
        raise ValueError(f"expected {N_CHAMBERS * model.n_segments} pressures, got {p.size}")
    p, clamped = clamp_pressures(p)
    if clamped:
        warnings.warn("pressure outside [0, 100] kPa clamped", RuntimeWarning, stacklevel=2)
    P = p.reshape(-1, N_CHAMBERS)
    lengths = np.einsum("ij,ij->i", np.array(model.k), P) + np.array(model.l0)
    return lengths, clamped


def fit_pressure_model(samples: Sequence[tuple[Sequence[float], ...]]) -> PressureModel:
    """Ordinary least squares fit of ``(k_i, l0_i)`` per segment.

    Each sample is ``(pressures, l_1, ..., l_n)`` with ``3 n`` pressures.
    """
    if not samples:
        raise ValueError("no samples")
    P = np.array([np.asarray(s[0], dtype=float) for s in samples])
    L = np.array([[float(v) for v in s[1:]] for s in samples])
    n_seg = L.shape[1]
    if P.shape[1] != N_CHAMBERS * n_seg:
        raise ValueError("pressure vector size does not match the number of lengths")
    ks, l0s = [], []
    for i in range(n_seg):
        X = np.column_stack([P[:, N_CHAMBERS * i:N_CHAMBERS * (i + 1)], np.ones(len(P))])
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise np.linalg.LinAlgError(
                f"segment {i + 1}: pressure design matrix is rank deficient "
                f"({len(P)} samples, need {X.shape[1]} independent)")
        coef, *_ = np.linalg.lstsq(X, L[:, i], rcond=None)
        ks.append(tuple(coef[:N_CHAMBERS]))
        l0s.append(coef[N_CHAMBERS])
    return PressureModel(tuple(ks), tuple(l0s))
