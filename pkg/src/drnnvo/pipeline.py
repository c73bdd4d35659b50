"""Frame-by-frame visual odometry: detect, match, estimate, refine, compose.

Two pose chains are integrated from the same raw increments and the same
ground-truth translation scale. The raw chain uses the VO orientation
increment as is; the refined chain replaces it with the network output.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CameraIntrinsics, KittiSequence, SyntheticSequence, gt_increment
from .driftnet import MlpModel, compute_stats, feature_motion, load_model, refine_increment
from .epipolar import MsacConfig, estimate_motion
from .errors import (
    AlreadyScaled,
    CheiralityAmbiguous,
    DatasetError,
    DegenerateConfiguration,
    EstimationFailed,
    NoMatches,
)
from .features import (
    DetectorConfig,
    FeatureSet,
    MatcherConfig,
    describe,
    detect,
    match_forward_backward,
)
from .geometry import MotionIncrement, Pose, UnitQuaternion, compose, quat_exp, quat_mul
from .matches import MatchedFeatureSet

log = logging.getLogger(__name__)

OK, FALLBACK, FAILED = "ok", "fallback", "failed"
_RECOVERABLE = (NoMatches, EstimationFailed, CheiralityAmbiguous, DegenerateConfiguration)
_FORWARD = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RunOptions:
    detector: DetectorConfig = DetectorConfig()
    matcher: MatcherConfig = MatcherConfig()
    msac: MsacConfig = MsacConfig()
    model_path: str | None = None
    scale_source: str = "ground_truth"
    seed: int = 0
    near_static_px: float = 1.0
    # warn when more than this fraction of frames fall back
    fallback_alert: float = 0.10
    # Synthetic VO corruption: a yaw error of gain * mean horizontal flow
    # (degrees per pixel) plus Gaussian noise (degrees) on every raw increment.
    yaw_bias_gain: float = 0.0
    yaw_bias_noise: float = 0.0

    def __post_init__(self):
        if self.scale_source != "ground_truth":
            raise ValueError("monocular scale is only available from ground truth")


@dataclass
class VoState:
    prev_features: FeatureSet | None = None
    raw_pose: Pose = field(default_factory=Pose)
    refined_pose: Pose = field(default_factory=Pose)
    last_good: MotionIncrement | None = None
    last_refined: UnitQuaternion | None = None
    frame_index: int = -1


@dataclass(frozen=True)
class FrameResult:
    increment: MotionIncrement | None
    matches: MatchedFeatureSet | None
    features: FeatureSet | None
    status: str = OK


@dataclass
class Trajectory:
    frames: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    status: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def append(self, frame: int, pose: Pose, status: str = OK):
        if self.frames and frame <= self.frames[-1]:
            raise ValueError("frame indices must be strictly increasing")
        self.frames.append(int(frame))
        self.poses.append(pose)
        self.status.append(status)

    @classmethod
    def from_poses(cls, poses, first_frame: int = 0) -> Trajectory:
        t = cls()
        for i, p in enumerate(poses):
            t.append(first_frame + i, p)
        return t

    def restrict(self, start_frame: int) -> Trajectory:
        keep = [i for i, f in enumerate(self.frames) if f >= start_frame]
        return Trajectory([self.frames[i] for i in keep], [self.poses[i] for i in keep],
                          [self.status[i] for i in keep])

    def to_csv(self) -> str:
        lines = ["frame,px,py,pz,qw,qx,qy,qz,status"]
        for f, p, s in zip(self.frames, self.poses, self.status):
            vals = list(p.p) + [p.q.w, p.q.x, p.q.y, p.q.z]
            lines.append(f"{f}," + ",".join(f"{float(v):.9g}" for v in vals) + f",{s}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> Trajectory:
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DatasetError(f"cannot read trajectory {path}: {e}") from e
        if not lines or lines[0].strip() != "frame,px,py,pz,qw,qx,qy,qz,status":
            raise DatasetError(f"{path}: not a trajectory file")
        t = cls()
        try:
            for line in lines[1:]:
                if not line.strip():
                    continue
                tok = line.split(",")
                v = [float(x) for x in tok[1:8]]
                t.append(int(tok[0]), Pose(v[:3], UnitQuaternion(*v[3:7])), tok[8])
        except (ValueError, IndexError) as e:
            raise DatasetError(f"{path}: malformed row: {e}") from e
        return t


@dataclass(frozen=True)
class FrameLog:
    frame: int
    status: str
    raw: MotionIncrement          # unit direction, VO rotation
    scale: float
    refined_dq: UnitQuaternion | None
    matches: MatchedFeatureSet | None


@dataclass
class VoRun:
    raw: Trajectory
    refined: Trajectory | None
    frames: list
    summary: dict


def apply_gt_scale(inc: MotionIncrement, gt_scale: float) -> MotionIncrement:
    if inc.scaled:
        raise AlreadyScaled("increment is already scaled")
    if not gt_scale >= 0:
        raise ValueError(f"scale must be non-negative, got {gt_scale}")
    return MotionIncrement(gt_scale * inc.dp, inc.dq, scaled=True)


def _frame_seed(seed: int, frame: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, frame, stream]).generate_state(1)[0])


def _yaw_bias(inc, matches, opts, frame):
    if not (opts.yaw_bias_gain or opts.yaw_bias_noise):
        return inc
    rng = np.random.default_rng(_frame_seed(opts.seed, frame, 1))
    mu_u = compute_stats(feature_motion(matches)).mu_u
    bias = opts.yaw_bias_gain * mu_u + opts.yaw_bias_noise * rng.standard_normal()
    dq = quat_mul(inc.dq, quat_exp([0.0, math.radians(bias), 0.0]))
    return replace(inc, dq=dq)


def estimate_from_matches(state: VoState, matches: MatchedFeatureSet | None,
                          K: CameraIntrinsics, opts: RunOptions, frame: int):
    """Unit increment and status for one frame pair, with the fallback policy.

    Failures reuse the last good increment (constant velocity); frames with
    too little parallax keep the orientation and reuse the last direction.
    """
    try:
        if matches is None:
            raise NoMatches("no matches")
        cfg = replace(opts.msac, seed=_frame_seed(opts.msac.seed ^ opts.seed, frame))
        est = estimate_motion(matches, K, cfg, opts.near_static_px)
    except _RECOVERABLE as e:
        log.debug("frame %d: %s", frame, e)
        if state.last_good is not None:
            return state.last_good, FALLBACK
        return MotionIncrement(_FORWARD, UnitQuaternion.identity()), FAILED
    if est.near_static:
        direction = _FORWARD if state.last_good is None else state.last_good.dp
        return MotionIncrement(direction, UnitQuaternion.identity()), FALLBACK
    inc = _yaw_bias(est.increment, matches, opts, frame)
    state.last_good = inc
    return inc, OK


def process_frame(state: VoState, image, K: CameraIntrinsics,
                  opts: RunOptions = RunOptions()) -> FrameResult:
    """Detect, describe and match ``image`` against the stored features.

    The first call only primes the state and returns no increment.
    """
    feats = describe(image, detect(image, opts.detector))
    frame = state.frame_index + 1
    if state.prev_features is None:
        state.prev_features = feats
        state.frame_index = frame
        return FrameResult(None, None, feats, OK)
    try:
        matches = match_forward_backward(state.prev_features, feats, opts.matcher,
                                         (frame - 1, frame))
    except NoMatches:
        matches = None
    inc, status = estimate_from_matches(state, matches, K, opts, frame)
    state.prev_features = feats
    state.frame_index = frame
    return FrameResult(inc, matches, feats, status)


def run_vo(seq, opts: RunOptions = RunOptions(), model: MlpModel | None = None) -> VoRun:
    """Integrate raw (and, given a model, refined) trajectories over ``seq``.

    Both chains start at the ground-truth pose of the first frame and take
    their per-frame translation length from the ground truth.
    """
    if len(seq) < 2:
        raise DatasetError("a sequence needs at least 2 frames")
    if model is None and opts.model_path:
        model = load_model(opts.model_path)
    K = seq.intrinsics
    first = seq.first_frame
    start = seq.gt_poses[0]
    state = VoState(raw_pose=start, refined_pose=start, frame_index=first)
    raw_traj = Trajectory.from_poses([start], first)
    ref_traj = Trajectory.from_poses([start], first) if model is not None else None
    logs = []

    if isinstance(seq, KittiSequence):
        state.frame_index = first - 1
        process_frame(state, seq.image(0), K, opts)

    for i in range(1, len(seq)):
        frame = first + i
        if isinstance(seq, SyntheticSequence):
            matches = seq.matches[i - 1]
            inc, status = estimate_from_matches(state, matches, K, opts, frame)
            state.frame_index = frame
        else:
            res = process_frame(state, seq.image(i), K, opts)
            matches, inc, status = res.matches, res.increment, res.status
        _, scale = gt_increment(seq.gt_poses, i)
        scaled = apply_gt_scale(inc, scale)
        state.raw_pose = compose(state.raw_pose, scaled)
        raw_traj.append(frame, state.raw_pose, status)

        refined_dq = None
        if model is not None:
            if status == OK:
                refined_dq = refine_increment(model, inc.dq, matches)
                state.last_refined = refined_dq
            elif status == FALLBACK and state.last_refined is not None and inc is state.last_good:
                refined_dq = state.last_refined
            else:
                refined_dq = inc.dq
            state.refined_pose = compose(state.refined_pose,
                                         MotionIncrement(scaled.dp, refined_dq, scaled=True))
            ref_traj.append(frame, state.refined_pose, status)
        logs.append(FrameLog(frame, status, inc, scale, refined_dq, matches))

    n = len(logs)
    counts = {s: sum(1 for f in logs if f.status == s) for s in (OK, FALLBACK, FAILED)}
    summary = {"sequence": getattr(seq, "seq_id", ""), "first_frame": first, "frames": n + 1,
               "status_counts": counts, "warnings": []}
    frac = (counts[FALLBACK] + counts[FAILED]) / n
    summary["fallback_fraction"] = frac
    if frac > opts.fallback_alert:
        msg = (f"{counts[FALLBACK] + counts[FAILED]} of {n} frames "
               f"({100 * frac:.1f}%) used the fallback increment")
        log.warning(msg)
        summary["warnings"].append(msg)
    return VoRun(raw_traj, ref_traj, logs, summary)
