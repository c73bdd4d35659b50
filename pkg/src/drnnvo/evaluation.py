"""Per-frame error series, RMSE summaries and CSV reports."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentMismatch, EmptySeries
from .geometry import angle_of, rotation_error

SUMMARY_HEADER = ("sequence,variant,rotation_rmse_deg,translation_rmse_m,distance_m,"
                  "incremental_rotation_rmse_deg")
SERIES_HEADER = ("frame,translation_error_m,orientation_error_deg,"
                 "incremental_orientation_error_deg")


@dataclass(frozen=True)
class ErrorSeries:
    frames: np.ndarray
    translation: np.ndarray     # m
    orientation: np.ndarray     # deg, absolute
    incremental: np.ndarray     # deg, frame-to-frame; 0 for the first frame

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class RmseSummary:
    rotation_deg: float
    translation_m: float
    distance_m: float
    sequence: str = ""
    variant: str = "raw"
    incremental_rotation_deg: float = 0.0


def _frames_and_poses(traj):
    if hasattr(traj, "frames"):
        return list(traj.frames), list(traj.poses)
    poses = list(traj)
    return list(range(len(poses))), poses


def error_series(est, gt) -> ErrorSeries:
    """Errors of ``est`` against ``gt`` frame by frame.

    Both arguments are trajectories (objects with ``frames`` and ``poses``)
    or plain pose lists indexed from 0. Frame indices must agree exactly.
    """
    fe, pe = _frames_and_poses(est)
    fg, pg = _frames_and_poses(gt)
    if fe != fg:
        raise AlignmentMismatch(f"frame indices differ: {len(fe)} estimated vs {len(fg)} ground truth"
                                + ("" if len(fe) != len(fg) else " (same count, different frames)"))
    n = len(fe)
    trans = np.array([np.linalg.norm(a.p - b.p) for a, b in zip(pe, pg)]).reshape(n)
    orient = np.array([angle_of(rotation_error(b.q, a.q))
                       for a, b in zip(pe, pg)]).reshape(n)
    inc = np.zeros(n)
    for k in range(1, n):
        dq_est = pe[k - 1].q.inverse() @ pe[k].q
        dq_gt = pg[k - 1].q.inverse() @ pg[k].q
        inc[k] = angle_of(rotation_error(dq_gt, dq_est))
    return ErrorSeries(np.asarray(fe, dtype=int), trans, orient, inc)


def _rms(a) -> float:
    return math.sqrt(float(np.mean(np.square(a))))


def path_length(poses) -> float:
    """Arc length of a pose list or trajectory."""
    _, poses = _frames_and_poses(poses)
    return float(sum(np.linalg.norm(b.p - a.p) for a, b in zip(poses, poses[1:])))


def rmse(series: ErrorSeries, distance: float, sequence: str = "",
         variant: str = "raw") -> RmseSummary:
    if len(series) == 0:
        raise EmptySeries("cannot summarize an empty error series")
    # the first incremental entry is a placeholder, not a measurement
    inc = series.incremental[1:] if len(series) > 1 else series.incremental
    return RmseSummary(_rms(series.orientation), _rms(series.translation), float(distance),
                       sequence, variant, _rms(inc))


def _fmt(v) -> str:
    return f"{float(v):.9g}"


def summary_csv(summaries) -> str:
    lines = [SUMMARY_HEADER]
    for s in summaries:
        lines.append(",".join([s.sequence, s.variant, _fmt(s.rotation_deg), _fmt(s.translation_m),
                               _fmt(s.distance_m), _fmt(s.incremental_rotation_deg)]))
    return "\n".join(lines) + "\n"


def series_csv(series: ErrorSeries) -> str:
    lines = [SERIES_HEADER]
    for f, t, o, i in zip(series.frames, series.translation, series.orientation,
                          series.incremental):
        lines.append(f"{int(f)},{_fmt(t)},{_fmt(o)},{_fmt(i)}")
    return "\n".join(lines) + "\n"


def report(summaries, series, out_dir) -> list[Path]:
    """Write ``summary.csv`` and one ``errors_<seq>_<variant>.csv`` per entry
    of ``series`` (a mapping from (sequence, variant) to ErrorSeries)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "summary.csv"]
    written[0].write_bytes(summary_csv(summaries).encode())
    for (seq, variant), s in sorted(series.items()):
        p = out / f"errors_{seq}_{variant}.csv"
        p.write_bytes(series_csv(s).encode())
        written.append(p)
    return written
