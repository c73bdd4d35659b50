"""KITTI odometry ingestion, sequence splitting and synthetic scenes.

The synthetic generator is the ground-truth oracle for the epipolar and
drift-network code: every pair it emits is an exact projection of a known
3-D point (plus optional pixel noise and injected mismatches).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DatasetError,
    DegenerateScene,
    IndexOutOfRange,
    MalformedCalib,
    MalformedPoses,
)
from .geometry import (
    MotionIncrement,
    Pose,
    compose,
    is_rotation,
    nearest_rotation,
    quat_exp,
    quat_mul,
    quat_to_rot,
    relative_increment,
    rot_to_quat,
    skew,
)
from .matches import MatchedFeatureSet

MIN_VISIBLE = 8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# KITTI sequence 00, left grayscale camera.
KITTI_00_INTRINSICS = CameraIntrinsics(718.856, 718.856, 607.1928, 185.2157)


@dataclass(frozen=True)
class KittiSequence:
    seq_id: str
    frame_paths: tuple[Path, ...]
    intrinsics: CameraIntrinsics
    gt_poses: tuple[Pose, ...]
    first_frame: int = 0

    def __post_init__(self):
        if len(self.frame_paths) != len(self.gt_poses):
            raise DatasetError(
                f"sequence {self.seq_id}: {len(self.frame_paths)} frames but "
                f"{len(self.gt_poses)} ground-truth poses")

    def __len__(self):
        return len(self.gt_poses)

    def image(self, i: int) -> np.ndarray:
        return load_image(self.frame_paths[i])

    def slice(self, start: int, stop: int) -> KittiSequence:
        return replace(self, frame_paths=self.frame_paths[start:stop],
                       gt_poses=self.gt_poses[start:stop],
                       first_frame=self.first_frame + start)


@dataclass(frozen=True)
class SyntheticSequence:
    """Pre-matched synthetic sequence; ``matches[i]`` links frames i and i+1."""

    matches: tuple[MatchedFeatureSet, ...]
    gt_poses: tuple[Pose, ...]
    intrinsics: CameraIntrinsics
    seq_id: str = "synthetic"
    first_frame: int = 0

    def __post_init__(self):
        if len(self.matches) != max(len(self.gt_poses) - 1, 0):
            raise DatasetError("synthetic sequence needs one match set per frame pair")

    def __len__(self):
        return len(self.gt_poses)

    def slice(self, start: int, stop: int) -> SyntheticSequence:
        stop = min(stop, len(self))
        return replace(self, matches=self.matches[start:max(stop - 1, start)],
                       gt_poses=self.gt_poses[start:stop],
                       first_frame=self.first_frame + start)


@dataclass
class SyntheticSceneConfig:
    """Synthetic scene and trajectory description.

    The trajectory is either ``waypoints`` (explicit poses) or a parametric
    drive: constant ``speed`` along the camera z axis with a per-frame yaw
    (about the camera y axis) of ``yaw_rate_deg + yaw_wave_deg * sin(2 pi k /
    yaw_wave_period)`` and an optional pitch wobble.
    """

    n_frames: int = 100
    n_points: int = 200
    pixel_noise_sigma: float = 0.0
    mismatch_rate: float = 0.0
    image_width: int = 1241
    image_height: int = 376
    intrinsics: CameraIntrinsics = KITTI_00_INTRINSICS
    seed: int = 0
    speed: float = 1.0
    yaw_rate_deg: float = 0.0
    yaw_wave_deg: float = 0.0
    yaw_wave_period: float = 100.0
    pitch_wave_deg: float = 0.0
    depth_min: float = 5.0
    depth_max: float = 50.0
    waypoints: list[Pose] | None = None

    def validate(self):
        if self.n_points < 20:
            raise DegenerateScene(f"n_points={self.n_points} < 20")
        if not 0.0 <= self.mismatch_rate < 1.0:
            raise DegenerateScene(f"mismatch_rate={self.mismatch_rate} outside [0, 1)")
        if self.pixel_noise_sigma < 0:
            raise DegenerateScene("pixel_noise_sigma must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            raise DegenerateScene("need 0 < depth_min < depth_max")
        n = len(self.waypoints) if self.waypoints is not None else self.n_frames
        if n < 2:
            raise DegenerateScene("a sequence needs at least 2 frames")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = asdict(self.intrinsics)
        if self.waypoints is not None:
            d["waypoints"] = [p.as_matrix().reshape(-1).tolist() for p in self.waypoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSceneConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        if "intrinsics" in d:
            d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        if d.get("waypoints") is not None:
            d["waypoints"] = [pose_from_row(np.asarray(r, dtype=float)) for r in d["waypoints"]]
        return cls(**d)


# --------------------------------------------------------------------------
# KITTI text formats


def parse_calib(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise MalformedCalib(f"cannot read {path}: {e}") from e
    for line in lines:
        if line.startswith("P0:"):
            tokens = line[3:].split()
            if len(tokens) != 12:
                raise MalformedCalib(f"{path}: P0 has {len(tokens)} values, expected 12")
            try:
                P = [float(t) for t in tokens]
            except ValueError as e:
                raise MalformedCalib(f"{path}: non-numeric P0 entry") from e
            try:
                return CameraIntrinsics(fx=P[0], fy=P[5], cx=P[2], cy=P[6])
            except ValueError as e:
                raise MalformedCalib(f"{path}: {e}") from e
    raise MalformedCalib(f"{path}: no P0 line")


def pose_from_row(row, tol=1e-4) -> Pose:
    M = np.asarray(row, dtype=float).reshape(3, 4)
    if not is_rotation(M[:, :3], tol):
        raise MalformedPoses("rotation block is not in SO(3)")
    return Pose(M[:, 3], rot_to_quat(nearest_rotation(M[:, :3])))


def parse_poses(path) -> list[Pose]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise MalformedPoses(f"cannot read {path}: {e}") from e
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise MalformedPoses(f"{path}:{lineno}: {len(tokens)} values, expected 12")
        try:
            row = [float(t) for t in tokens]
        except ValueError as e:
            raise MalformedPoses(f"{path}:{lineno}: non-numeric value") from e
        try:
            poses.append(pose_from_row(row))
        except MalformedPoses as e:
            raise MalformedPoses(f"{path}:{lineno}: {e}") from e
    if not poses:
        raise MalformedPoses(f"{path}: no poses")
    return poses


def format_poses(poses) -> str:
    # repr() is the shortest string that round-trips the double exactly
    return "".join(
        " ".join(repr(float(v)) for v in p.as_matrix().reshape(-1)) + "\n" for p in poses)


def write_poses(path, poses):
    Path(path).write_text(format_poses(poses))


def write_calib(path, K: CameraIntrinsics):
    P = [K.fx, 0.0, K.cx, 0.0, 0.0, K.fy, K.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    Path(path).write_text("P0: " + " ".join(repr(float(v)) for v in P) + "\n")


def load_image(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e


def load_kitti_sequence(root, seq_id: str) -> KittiSequence:
    root = Path(root)
    seq_dir = root / "sequences" / seq_id
    img_dir = seq_dir / "image_0"
    if not img_dir.is_dir():
        raise DatasetError(f"missing image directory {img_dir}")
    pose_path = root / "poses" / f"{seq_id}.txt"
    if not pose_path.is_file():
        raise DatasetError(f"missing ground-truth poses {pose_path}")
    intrinsics = parse_calib(seq_dir / "calib.txt")
    poses = parse_poses(pose_path)
    frames = tuple(img_dir / f"{i:06d}.png" for i in range(len(poses)))
    missing = [f for f in frames if not f.is_file()]
    if missing:
        raise DatasetError(f"{len(missing)} frames missing, first: {missing[0]}")
    return KittiSequence(seq_id, frames, intrinsics, tuple(poses))


def save_synthetic(seq: SyntheticSequence, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_poses(out / "poses.txt", seq.gt_poses)
    write_calib(out / "calib.txt", seq.intrinsics)
    for m in seq.matches:
        rows = ["u1,v1,u2,v2,is_corrupted"]
        for a, b, c in zip(m.prev.tolist(), m.curr.tolist(), m.corrupted):
            rows.append(",".join(repr(v) for v in a + b) + f",{int(c)}")
        (out / f"matches_{m.frames[1]:06d}.csv").write_text("\n".join(rows) + "\n")


def load_synthetic(path, seq_id: str = "synthetic") -> SyntheticSequence:
    path = Path(path)
    if not (path / "poses.txt").is_file():
        raise DatasetError(f"missing {path / 'poses.txt'}")
    poses = parse_poses(path / "poses.txt")
    intrinsics = parse_calib(path / "calib.txt")
    matches = []
    for k in range(1, len(poses)):
        f = path / f"matches_{k:06d}.csv"
        if not f.is_file():
            raise DatasetError(f"missing {f}")
        try:
            data = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
        except ValueError as e:
            raise DatasetError(f"{f}: {e}") from e
        if data.shape[1] != 5:
            raise DatasetError(f"{f}: expected 5 columns")
        matches.append(MatchedFeatureSet(data[:, 0:2], data[:, 2:4], (k - 1, k),
                                         data[:, 4].astype(bool)))
    return SyntheticSequence(tuple(matches), tuple(poses), intrinsics, seq_id)


def load_sequence(root, seq_id: str):
    """Load a KITTI sequence or a serialized synthetic one, by layout."""
    root = Path(root)
    if (root / "sequences" / seq_id).exists() or (root / "poses" / f"{seq_id}.txt").exists():
        return load_kitti_sequence(root, seq_id)
    if (root / seq_id / "poses.txt").is_file():
        return load_synthetic(root / seq_id, seq_id)
    if (root / "poses.txt").is_file() and (root / "matches_000001.csv").is_file():
        return load_synthetic(root, seq_id)
    raise DatasetError(f"no sequence {seq_id!r} under {root} "
                       f"(looked for {root / 'sequences' / seq_id})")


# --------------------------------------------------------------------------
# ground truth and splitting


def gt_increment(poses, k: int) -> tuple[MotionIncrement, float]:
    """Scaled increment from pose k-1 to pose k and its metric length."""
    if not 1 <= k < len(poses):
        raise IndexOutOfRange(f"k={k} outside [1, {len(poses)})")
    a, b = poses[k - 1], poses[k]
    return relative_increment(a, b), float(np.linalg.norm(b.p - a.p))


def split_index(n: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    return math.floor(fraction * n)


def split_sequence(seq, fraction: float = 0.6):
    """First ``floor(fraction * N)`` frames for training, the rest for testing.

    The test part's ``first_frame`` records the split index.
    """
    s = split_index(len(seq), fraction)
    return seq.slice(0, s), seq.slice(s, len(seq))


# --------------------------------------------------------------------------
# synthetic scenes


def synthetic_trajectory(cfg: SyntheticSceneConfig) -> list[Pose]:
    if cfg.waypoints is not None:
        return list(cfg.waypoints)
    poses = [Pose()]
    for k in range(1, cfg.n_frames):
        phase = 2.0 * math.pi * k / cfg.yaw_wave_period
        yaw = math.radians(cfg.yaw_rate_deg + cfg.yaw_wave_deg * math.sin(phase))
        pitch = math.radians(cfg.pitch_wave_deg * math.sin(0.37 * phase))
        dq = quat_exp([pitch, yaw, 0.0])
        poses.append(compose(poses[-1], MotionIncrement([0.0, 0.0, cfg.speed], dq, scaled=True)))
    return poses


def project(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    return np.column_stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy])


def _frame_pair(cfg, a: Pose, b: Pose, rng, k) -> MatchedFeatureSet:
    K = cfg.intrinsics
    n = cfg.n_points
    u = rng.uniform(0.0, cfg.image_width, n)
    v = rng.uniform(0.0, cfg.image_height, n)
    z = rng.uniform(cfg.depth_min, cfg.depth_max, n)
    X_a = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    # camera a -> world -> camera b
    X_w = X_a @ a.R.T + a.p
    X_b = (X_w - b.p) @ b.R
    front = X_b[:, 2] > 0.1
    uv_b = np.full((n, 2), -1.0)
    uv_b[front] = project(K, X_b[front])
    visible = (front & (uv_b[:, 0] >= 0) & (uv_b[:, 0] < cfg.image_width)
               & (uv_b[:, 1] >= 0) & (uv_b[:, 1] < cfg.image_height))
    prev = np.column_stack([u, v])[visible]
    curr = uv_b[visible]
    if cfg.pixel_noise_sigma > 0:
        prev = prev + rng.normal(0.0, cfg.pixel_noise_sigma, prev.shape)
        curr = curr + rng.normal(0.0, cfg.pixel_noise_sigma, curr.shape)
    m = MatchedFeatureSet(prev, curr, (k - 1, k))
    if cfg.mismatch_rate > 0:
        m = inject_mismatches(m, cfg.mismatch_rate, rng)
    if np.count_nonzero(~m.corrupted) < MIN_VISIBLE:
        raise DegenerateScene(
            f"frame {k}: {np.count_nonzero(~m.corrupted)} clean visible points < {MIN_VISIBLE}")
    return m


def generate_synthetic_sequence(cfg: SyntheticSceneConfig) -> SyntheticSequence:
    """Pre-matched synthetic sequence.

    For each frame pair, ``n_points`` world points are drawn uniformly in the
    view frustum of the earlier camera (depth in [depth_min, depth_max]) and
    projected into both views. Points that fall behind or outside the later
    view are dropped, Gaussian pixel noise is added to both observations and
    mismatches are injected last.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    poses = synthetic_trajectory(cfg)
    matches = tuple(_frame_pair(cfg, poses[k - 1], poses[k], rng, k)
                    for k in range(1, len(poses)))
    return SyntheticSequence(matches, tuple(poses), cfg.intrinsics)


def _derangement(m: int, rng) -> np.ndarray:
    while True:
        perm = rng.permutation(m)
        if not np.any(perm == np.arange(m)):
            return perm


def inject_mismatches(matches: MatchedFeatureSet, rate: float, rng) -> MatchedFeatureSet:
    """Corrupt ``floor(rate * N)`` pairs by re-associating their second feature.

    The chosen pairs exchange their current-frame features through a
    derangement, so every corrupted pair links two real detections that do
    not belong together. A single chosen pair borrows the current feature of
    a random untouched pair instead.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mismatch rate must lie in [0, 1), got {rate}")
    n = len(matches)
    m = math.floor(rate * n)
    if m == 0:
        return matches
    chosen = np.sort(rng.choice(n, size=m, replace=False))
    curr = matches.curr.copy()
    if m == 1:
        others = np.setdiff1d(np.arange(n), chosen)
        curr[chosen[0]] = matches.curr[rng.choice(others)]
    else:
        curr[chosen] = matches.curr[chosen[_derangement(m, rng)]]
    flags = matches.corrupted.copy()
    flags[chosen] = True
    return MatchedFeatureSet(matches.prev, curr, matches.frames, flags,
                             matches.prev_idx, matches.curr_idx)


def true_essential(a: Pose, b: Pose) -> np.ndarray:
    """Essential matrix with ``x_a^T E x_b = 0`` for normalized points."""
    R = quat_to_rot(quat_mul(a.q.conj(), b.q))
    t = a.R.T @ (b.p - a.p)
    return skew(t) @ R
