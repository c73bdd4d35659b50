"""Command-line entry point: run-vo, train, eval, synth.

Exit codes: 0 ok, 2 dataset/input error, 3 model file error, 4 training
failure, 5 degenerate synthetic scene.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .dataset import (
    KittiSequence,
    SyntheticSceneConfig,
    generate_synthetic_sequence,
    gt_increment,
    load_sequence,
    save_synthetic,
    split_index,
)
from .driftnet import TrainConfig, build_training_set, load_model, save_model, train_lm_br
from .epipolar import MsacConfig
from .errors import (
    DatasetError,
    DegenerateScene,
    DrnnVoError,
    ModelFormatError,
    TrainingError,
)
from .evaluation import error_series, path_length, report, rmse
from .features import DetectorConfig, MatcherConfig
from .pipeline import OK, RunOptions, Trajectory, run_vo

log = logging.getLogger("drnnvo")

EXIT_OK, EXIT_DATA, EXIT_MODEL, EXIT_TRAIN, EXIT_SCENE = 0, 2, 3, 4, 5


# --------------------------------------------------------------------------
# manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _sequence_digests(seq, root) -> dict:
    """Digests of the text inputs of a sequence; images are counted, not hashed."""
    root = Path(root)
    if isinstance(seq, KittiSequence):
        files = [root / "poses" / f"{seq.seq_id}.txt",
                 root / "sequences" / seq.seq_id / "calib.txt"]
        out = {str(f): _sha256(f) for f in files}
        out[f"{seq.seq_id}:image_count"] = len(seq.frame_paths)
        return out
    base = root / seq.seq_id if (root / seq.seq_id / "poses.txt").is_file() else root
    return {str(f): _sha256(f) for f in sorted(base.glob("*.txt")) + sorted(base.glob("*.csv"))}


def write_manifest(out_dir, command: str, config: dict, seed, inputs: dict):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "version": __version__,
        "timestamp": _timestamp(),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# shared options


def _add_vo_flags(p):
    g = p.add_argument_group("visual odometry")
    g.add_argument("--max-features", type=int, default=DetectorConfig.max_features)
    g.add_argument("--max-hamming", type=int, default=MatcherConfig.max_hamming)
    g.add_argument("--sampson-threshold", type=float, default=MsacConfig.sampson_threshold)
    g.add_argument("--max-iterations", type=int, default=MsacConfig.max_iterations)
    g.add_argument("--min-inliers", type=int, default=MsacConfig.min_inliers)
    g.add_argument("--near-static-px", type=float, default=1.0)
    g.add_argument("--yaw-bias-gain", type=float, default=0.0,
                   help="synthetic yaw error per pixel of mean horizontal flow (deg/px)")
    g.add_argument("--yaw-bias-noise", type=float, default=0.0,
                   help="synthetic yaw noise added to raw increments (deg)")
    g.add_argument("--seed", type=int, default=0)


def _run_options(args) -> RunOptions:
    return RunOptions(
        detector=DetectorConfig(max_features=args.max_features),
        matcher=MatcherConfig(max_hamming=args.max_hamming),
        msac=MsacConfig(sampson_threshold=args.sampson_threshold,
                        max_iterations=args.max_iterations, min_inliers=args.min_inliers),
        model_path=getattr(args, "model", None),
        seed=args.seed,
        near_static_px=args.near_static_px,
        yaw_bias_gain=args.yaw_bias_gain,
        yaw_bias_noise=args.yaw_bias_noise,
    )


def _options_dict(opts: RunOptions) -> dict:
    return {
        "detector": asdict(opts.detector),
        "matcher": asdict(opts.matcher),
        "msac": asdict(opts.msac),
        "model_path": opts.model_path,
        "scale_source": opts.scale_source,
        "seed": opts.seed,
        "near_static_px": opts.near_static_px,
        "fallback_alert": opts.fallback_alert,
        "yaw_bias_gain": opts.yaw_bias_gain,
        "yaw_bias_noise": opts.yaw_bias_noise,
    }


def _sequence_list(values) -> list[str]:
    out = []
    for v in values or []:
        out += [s for s in v.replace(",", " ").split() if s]
    return out


def _portion(seq, portion: str, split: float):
    if portion == "all":
        return seq
    s = split_index(len(seq), split)
    return seq.slice(0, s) if portion == "train" else seq.slice(s, len(seq))


# --------------------------------------------------------------------------
# commands


def cmd_run_vo(args) -> int:
    seq = _portion(load_sequence(args.dataset, args.sequence), args.portion, args.split)
    opts = _run_options(args)
    model = load_model(args.model) if args.model else None
    run = run_vo(seq, opts, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.raw.save(out / f"traj_{args.sequence}_raw.csv")
    if run.refined is not None:
        run.refined.save(out / f"traj_{args.sequence}_refined.csv")
    for w in run.summary["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    inputs = _sequence_digests(seq, args.dataset)
    if args.model:
        inputs[str(args.model)] = _sha256(args.model)
    config = {"dataset": str(args.dataset), "sequence": args.sequence, "portion": args.portion,
              "split": args.split, "options": _options_dict(opts),
              "status_counts": run.summary["status_counts"]}
    write_manifest(out, "run-vo", config, args.seed, inputs)
    return EXIT_OK


def _training_samples(seq, opts):
    run = run_vo(seq, opts)
    raw = [f.raw if f.status == OK else None for f in run.frames]
    matches = [f.matches for f in run.frames]
    gt = [gt_increment(seq.gt_poses, i)[0] for i in range(1, len(seq))]
    return build_training_set(raw, matches, gt)


def cmd_train(args) -> int:
    opts = _run_options(args)
    partial = _sequence_list(args.sequences)
    full = _sequence_list(args.full_sequences)
    if not partial and not full:
        raise DatasetError("no training sequences given")
    samples, inputs, skipped = [], {}, 0
    for sid, portion in [(s, "train") for s in partial] + [(s, "all") for s in full]:
        seq = _portion(load_sequence(args.dataset, sid), portion, args.split)
        if len(seq) < 2:
            raise DatasetError(f"training portion of {sid} has fewer than 2 frames")
        got, n_skip = _training_samples(seq, opts)
        log.info("sequence %s: %d samples, %d skipped", sid, len(got), n_skip)
        samples += got
        skipped += n_skip
        inputs.update(_sequence_digests(seq, args.dataset))
    if len(samples) < 10:
        raise TrainingError(f"only {len(samples)} usable training frames (need >= 10)")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, bayesian=not args.no_bayesian)
    meta = {"sequences": partial, "full_sequences": full, "split": args.split,
            "skipped_frames": skipped}
    model, rep = train_lm_br(samples, cfg, meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_report.csv")
    report_path.write_text(rep.to_csv())
    config = {"dataset": str(args.dataset), "sequences": partial, "full_sequences": full,
              "split": args.split, "train": asdict(cfg), "options": _options_dict(opts),
              "model": str(out), "report": str(report_path)}
    write_manifest(out.parent, "train", config, args.seed, inputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    seq = load_sequence(args.gt_dataset, args.sequence)
    gt = Trajectory.from_poses(seq.gt_poses, seq.first_frame)
    if args.test_portion:
        gt = gt.restrict(split_index(len(seq), args.split))
    summaries, series, inputs = [], {}, {}
    distance = path_length(gt)
    for path in args.traj:
        est = Trajectory.load(path)
        if args.test_portion:
            est = est.restrict(gt.frames[0] if len(gt) else 0)
        variant = _variant_name(path, args.sequence)
        s = error_series(est, gt)
        summaries.append(rmse(s, distance, args.sequence, variant))
        series[(args.sequence, variant)] = s
        inputs[str(path)] = _sha256(path)
    if len(series) != len(args.traj):
        raise DatasetError("trajectory files map to duplicate variant names")
    report(summaries, series, args.out)
    inputs.update(_sequence_digests(seq, args.gt_dataset))
    config = {"traj": [str(p) for p in args.traj], "gt_dataset": str(args.gt_dataset),
              "sequence": args.sequence, "test_portion": args.test_portion, "split": args.split}
    write_manifest(args.out, "eval", config, None, inputs)
    return EXIT_OK


def _variant_name(path, seq_id: str) -> str:
    stem = Path(path).stem
    prefix = f"traj_{seq_id}_"
    return stem[len(prefix):] if stem.startswith(prefix) and len(stem) > len(prefix) else stem


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read config {args.config}: {e}") from e
    try:
        cfg = SyntheticSceneConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise DatasetError(f"invalid config {args.config}: {e}") from e
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    seq = generate_synthetic_sequence(cfg)
    out = Path(args.out)
    save_synthetic(seq, out)
    inputs = {str(args.config): _sha256(args.config)} if args.config else {}
    write_manifest(out, "synth", cfg.to_dict(), cfg.seed, inputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drnnvo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-vo", help="run visual odometry over one sequence")
    r.add_argument("--dataset", required=True)
    r.add_argument("--sequence", required=True)
    r.add_argument("--model")
    r.add_argument("--out", required=True)
    r.add_argument("--portion", choices=("all", "train", "test"), default="all")
    r.add_argument("--split", type=float, default=0.6)
    _add_vo_flags(r)
    r.set_defaults(func=cmd_run_vo)

    t = sub.add_parser("train", help="train the drift-reducing network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--sequences", nargs="*", default=[])
    t.add_argument("--split", type=float, default=0.6)
    t.add_argument("--full-sequences", nargs="*", default=[])
    t.add_argument("--epochs", type=int, default=1500)
    t.add_argument("--no-bayesian", action="store_true")
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    _add_vo_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare trajectories against ground truth")
    e.add_argument("--traj", nargs="+", required=True)
    e.add_argument("--gt-dataset", required=True)
    e.add_argument("--sequence", required=True)
    e.add_argument("--test-portion", action="store_true")
    e.add_argument("--split", type=float, default=0.6)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic matched-feature sequence")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DrnnVoError, ValueError, OSError) as e:
        print(f"drnnvo {args.command}: error: {e}", file=sys.stderr)
        return exit_code(e)


def exit_code(e: BaseException) -> int:
    if isinstance(e, ModelFormatError):
        return EXIT_MODEL
    if isinstance(e, TrainingError):
        return EXIT_TRAIN
    if isinstance(e, DegenerateScene):
        return EXIT_SCENE
    return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
