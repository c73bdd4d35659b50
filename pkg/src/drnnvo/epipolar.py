"""Calibrated two-view motion: essential matrix, MSAC and decomposition.

Convention: for a correspondence between the previous frame (x1) and the
current frame (x2), in normalized homogeneous coordinates,

    x1^T E x2 = 0,   E = [t]_x R,   X_prev = R X_curr + t.

R is therefore directly the orientation increment dq of the current camera
relative to the previous one, and the body-frame translation increment is
dp = R^T t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import CameraIntrinsics
from .errors import CheiralityAmbiguous, DegenerateConfiguration, EstimationFailed
from .geometry import MotionIncrement, UnitQuaternion, rot_to_quat
from .matches import MatchedFeatureSet

SAMPLE_SIZE = 8
_RANK_TOL = 1e-8
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class MsacConfig:
    sampson_threshold: float = 1e-3
    confidence: float = 0.99
    max_iterations: int = 2000
    min_inliers: int = 15
    seed: int = 0

    def __post_init__(self):
        if not self.sampson_threshold > 0:
            raise ValueError("sampson_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class MsacResult:
    E: np.ndarray
    inliers: np.ndarray
    cost: float
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))


@dataclass(frozen=True)
class MotionEstimate:
    """Unscaled increment plus diagnostics.

    ``near_static`` marks frames whose median pixel motion is below the
    parallax guard; their increment is an identity rotation with a
    placeholder direction that the caller is expected to replace.
    """

    increment: MotionIncrement
    msac: MsacResult | None
    near_static: bool = False


def normalize(points, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.column_stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy])


def denormalize(points, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.column_stack([p[:, 0] * K.fx + K.cx, p[:, 1] * K.fy + K.cy])


def _homogeneous(p):
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    return np.column_stack([p, np.ones(len(p))])


def sampson_error(E, x1, x2) -> np.ndarray:
    """First-order geometric distance of each pair to ``x1^T E x2 = 0``."""
    h1, h2 = _homogeneous(x1), _homogeneous(x2)
    Ex2 = h2 @ E.T
    Etx1 = h1 @ E
    num = np.einsum("ij,ij->i", h1, Ex2) ** 2
    den = Ex2[:, 0] ** 2 + Ex2[:, 1] ** 2 + Etx1[:, 0] ** 2 + Etx1[:, 1] ** 2
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    out[(den <= 0) & (num > 0)] = np.inf
    return np.sqrt(out)


def _hartley(p):
    c = p.mean(axis=0)
    d = np.linalg.norm(p - c, axis=1).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def project_to_essential(M) -> np.ndarray:
    """Nearest essential matrix, scaled so that ||E||_F = sqrt(2)."""
    U, _, Vt = np.linalg.svd(M)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def estimate_E_linear(x1, x2) -> np.ndarray:
    """Normalized eight-point solution projected onto the essential manifold."""
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    if len(x1) < SAMPLE_SIZE or len(x1) != len(x2):
        raise ValueError(f"need >= {SAMPLE_SIZE} aligned pairs, got {len(x1)}")
    T1, T2 = _hartley(x1), _hartley(x2)
    h1 = _homogeneous(x1) @ T1.T
    h2 = _homogeneous(x2) @ T2.T
    A = (h1[:, :, None] * h2[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.count_nonzero(s > _RANK_TOL * s[0])) if s[0] > 0 else 0
    if rank < 8:
        raise DegenerateConfiguration(f"design matrix rank {rank} < 8")
    E = T1.T @ Vt[-1].reshape(3, 3) @ T2
    return project_to_essential(E)


def _required_iterations(inlier_ratio, confidence, cap):
    good = inlier_ratio ** SAMPLE_SIZE
    if good >= 1.0:
        return 1
    denom = math.log1p(-good)
    if denom == 0.0:
        return cap
    return min(cap, max(1, math.ceil(math.log1p(-confidence) / denom)))


def msac(x1, x2, config: MsacConfig = MsacConfig()) -> MsacResult:
    """MSAC: hypothesize from random 8-point samples, score by truncated cost.

    Each pair costs min(d^2, threshold^2) with d its Sampson distance. The
    iteration bound adapts to the inlier ratio of the best hypothesis. The
    winner is re-estimated from all of its inliers and kept only if that
    does not raise the cost.
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    n = len(x1)
    if n < SAMPLE_SIZE:
        raise ValueError(f"MSAC needs at least {SAMPLE_SIZE} pairs, got {n}")
    th2 = config.sampson_threshold ** 2
    rng = np.random.default_rng(config.seed)

    def score(E):
        d2 = sampson_error(E, x1, x2) ** 2
        return float(np.minimum(d2, th2).sum()), d2 <= th2

    best = None
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        sample = rng.choice(n, SAMPLE_SIZE, replace=False)
        try:
            E = estimate_E_linear(x1[sample], x2[sample])
        except DegenerateConfiguration:
            continue
        cost, mask = score(E)
        if best is None or cost < best[1]:
            best = (E, cost, mask)
            needed = _required_iterations(mask.mean(), config.confidence, config.max_iterations)
    if best is None or np.count_nonzero(best[2]) < config.min_inliers:
        got = 0 if best is None else int(np.count_nonzero(best[2]))
        raise EstimationFailed(f"best hypothesis has {got} inliers < {config.min_inliers}")

    E, cost, mask = best
    try:
        E_all = estimate_E_linear(x1[mask], x2[mask])
        cost_all, mask_all = score(E_all)
        if cost_all <= cost and np.count_nonzero(mask_all) >= config.min_inliers:
            E, cost, mask = E_all, cost_all, mask_all
    except DegenerateConfiguration:
        pass
    return MsacResult(E, mask, cost, it)


def triangulate(R, t, x1, x2) -> np.ndarray:
    """Linear (DLT) triangulation in the current camera frame.

    Returns unit-norm homogeneous points (N, 4). The current camera is
    [I | 0] and the previous one [R | t].
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    P2 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P1 = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack([
        x2[:, 0, None] * P2[2] - P2[0],
        x2[:, 1, None] * P2[2] - P2[1],
        x1[:, 0, None] * P1[2] - P1[0],
        x1[:, 1, None] * P1[2] - P1[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def _cheirality(R, t, x1, x2):
    X = triangulate(R, t, x1, x2)
    w = X[:, 3]
    finite = np.abs(w) > 1e-12
    z_curr = np.where(finite, X[:, 2] / np.where(finite, w, 1.0), 0.0)
    X_prev = X[:, :3] @ R.T + np.outer(w, t)
    z_prev = np.where(finite, X_prev[:, 2] / np.where(finite, w, 1.0), 0.0)
    front = finite & (z_curr > 0) & (z_prev > 0)
    margin = float(np.median(np.minimum(z_curr, z_prev))) if len(X) else 0.0
    return int(np.count_nonzero(front)), margin


def pose_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1, R2 = U @ _W @ Vt, U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_E(E, x1, x2) -> MotionIncrement:
    """Pick the (R, t) candidate that puts the most points in front of both
    cameras; equal counts fall back to the larger median depth margin.

    Raises CheiralityAmbiguous when no candidate has a point in front of
    both cameras or when the top two are indistinguishable.
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    if len(x1) == 0:
        raise ValueError("decomposition needs at least one inlier pair")
    cands = pose_candidates(E)
    scored = sorted(((*_cheirality(R, t, x1, x2), i) for i, (R, t) in enumerate(cands)),
                    key=lambda s: (-s[0], -s[1], s[2]))
    (n0, m0, i0), (n1, m1, _) = scored[0], scored[1]
    if n0 == 0:
        raise CheiralityAmbiguous("no candidate puts a point in front of both cameras")
    if n0 == n1 and math.isclose(m0, m1, rel_tol=1e-9, abs_tol=1e-12):
        raise CheiralityAmbiguous(f"two candidates tie with {n0} points in front")
    R, t = cands[i0]
    dp = R.T @ t
    return MotionIncrement(dp / np.linalg.norm(dp), rot_to_quat(R))


def estimate_motion(matches: MatchedFeatureSet, K: CameraIntrinsics,
                    config: MsacConfig = MsacConfig(),
                    near_static_px: float = 1.0) -> MotionEstimate:
    """Normalize, run MSAC and decompose the winning essential matrix."""
    if len(matches) < config.min_inliers:
        raise EstimationFailed(f"{len(matches)} matches < min_inliers={config.min_inliers}")
    motion = np.median(np.linalg.norm(matches.deltas, axis=1))
    if motion < near_static_px:
        placeholder = MotionIncrement(np.array([0.0, 0.0, 1.0]), UnitQuaternion.identity())
        return MotionEstimate(placeholder, None, near_static=True)
    x1 = normalize(matches.prev, K)
    x2 = normalize(matches.curr, K)
    result = msac(x1, x2, config)
    inc = decompose_E(result.E, x1[result.inliers], x2[result.inliers])
    return MotionEstimate(inc, result)
