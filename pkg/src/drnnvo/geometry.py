"""Quaternion and rotation algebra.

Conventions
-----------
- Hamilton product, components ordered (w, x, y, z).
- A pose quaternion maps body (camera) coordinates to world coordinates.
- Quaternions are kept on the canonical hemisphere w >= 0. When w is zero
  the first nonzero of (x, y, z) is made positive.
- Tangent vectors are rotation vectors (axis * angle, radians). ``quat_log``
  maps a quaternion to its rotation vector and ``quat_exp`` is its inverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotARotation, UnscaledIncrement

# Below this angle the log/exp maps switch to their Taylor expansions.
SMALL_ANGLE = 1e-9
# |w| below this counts as zero for the hemisphere tie-break.
_HEMISPHERE_EPS = 1e-12


def _canonical(w, x, y, z):
    if abs(w) > _HEMISPHERE_EPS:
        if w < 0.0:
            return -w, -x, -y, -z
        return w, x, y, z
    # w is numerically zero: snap it so that w >= 0 holds exactly
    for c in (x, y, z):
        if abs(c) > _HEMISPHERE_EPS:
            if c < 0.0:
                return 0.0, -x, -y, -z
            break
    return 0.0, x, y, z


@dataclass(frozen=True, slots=True)
class UnitQuaternion:
    """Unit quaternion, normalized and canonicalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        w, x, y, z = float(self.w), float(self.x), float(self.y), float(self.z)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if not math.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        w, x, y, z = _canonical(w / n, x / n, y / n, z / n)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> UnitQuaternion:
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def conj(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conj

    def __matmul__(self, other: UnitQuaternion) -> UnitQuaternion:
        return quat_mul(self, other)


@dataclass(frozen=True)
class Pose:
    """Camera pose: position ``p`` (world, meters) and body-to-world ``q``."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(3)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def as_matrix(self) -> np.ndarray:
        """3x4 [R | p] matrix, the KITTI pose layout."""
        return np.hstack([self.R, self.p.reshape(3, 1)])


@dataclass(frozen=True)
class MotionIncrement:
    """Frame-to-frame motion ``(dp, dq)``.

    ``dp`` is expressed in the current body frame so that
    ``p_k = p_{k-1} + R(q_k) dp``. Before scaling it is a unit direction.
    """

    dp: np.ndarray
    dq: UnitQuaternion
    scaled: bool = False

    def __post_init__(self):
        dp = np.array(self.dp, dtype=float).reshape(3)
        if not np.all(np.isfinite(dp)):
            raise ValueError("dp must be finite")
        if not self.scaled and abs(np.linalg.norm(dp) - 1.0) > 1e-9:
            raise ValueError("unscaled increment needs a unit-norm dp")
        dp.setflags(write=False)
        object.__setattr__(self, "dp", dp)

    @classmethod
    def identity(cls) -> MotionIncrement:
        return cls(np.zeros(3), UnitQuaternion.identity(), scaled=True)


def quat_mul(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    return UnitQuaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_log(q: UnitQuaternion) -> np.ndarray:
    """Rotation vector of ``q``; the angle lies in [0, pi]."""
    v = np.array([q.x, q.y, q.z])
    s = math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)
    angle = 2.0 * math.atan2(s, q.w)
    if angle < SMALL_ANGLE:
        # atan2(s, w) / s -> 1/w (1 - s^2 / (3 w^2))
        return v * (2.0 / q.w) * (1.0 - s * s / (3.0 * q.w * q.w))
    return v * (angle / s)


def quat_exp(v) -> UnitQuaternion:
    v = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("tangent vector must be finite")
    theta = math.sqrt(float(v @ v))
    if theta < SMALL_ANGLE:
        k = 0.5 - theta * theta / 48.0
        w = 1.0 - theta * theta / 8.0
    else:
        k = math.sin(0.5 * theta) / theta
        w = math.cos(0.5 * theta)
    return UnitQuaternion(w, k * v[0], k * v[1], k * v[2])


def quat_to_rot(q: UnitQuaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def rot_to_quat(R, tol=1e-6) -> UnitQuaternion:
    """Shepperd's method: pivot on the largest of trace and diagonal."""
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol):
        raise NotARotation("matrix fails the SO(3) check at tol=%g" % tol)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return UnitQuaternion(*q)


def nearest_rotation(M) -> np.ndarray:
    """Closest rotation to ``M`` in Frobenius norm (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def axis_angle_quat(axis, angle) -> UnitQuaternion:
    axis = np.asarray(axis, dtype=float)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def compose(prev: Pose, inc: MotionIncrement) -> Pose:
    if not inc.scaled:
        raise UnscaledIncrement("scale the increment before composing")
    q = quat_mul(prev.q, inc.dq)
    return Pose(prev.p + quat_to_rot(q) @ inc.dp, q)


def merge_increments(a: MotionIncrement, b: MotionIncrement) -> MotionIncrement:
    """Single increment equivalent to applying ``a`` then ``b``."""
    if not (a.scaled and b.scaled):
        raise UnscaledIncrement("merge needs scaled increments")
    dp = quat_to_rot(b.dq).T @ a.dp + b.dp
    return MotionIncrement(dp, quat_mul(a.dq, b.dq), scaled=True)


def relative_increment(a: Pose, b: Pose) -> MotionIncrement:
    """The scaled increment taking pose ``a`` to pose ``b``."""
    dq = quat_mul(a.q.conj(), b.q)
    dp = quat_to_rot(b.q).T @ (b.p - a.p)
    return MotionIncrement(dp, dq, scaled=True)


def rotation_error(gt: UnitQuaternion, est: UnitQuaternion) -> np.ndarray:
    return quat_to_rot(gt).T @ quat_to_rot(est)


def angle_of(R) -> float:
    """Rotation angle of ``R`` in degrees, in [0, 180].

    Evaluated as atan2(sin, cos) with the cosine clamped to [-1, 1]; equal
    to arccos((tr R - 1) / 2) but without its precision loss near 0 and 180.
    """
    R = np.asarray(R, dtype=float)
    c = min(1.0, max(-1.0, (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) / 2.0))
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2
                        + (R[1, 0] - R[0, 1]) ** 2)
    return math.degrees(math.atan2(s, c))


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
