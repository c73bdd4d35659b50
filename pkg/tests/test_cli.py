import json
import shutil

import numpy as np
import pytest

from drnnvo import cli
from drnnvo.dataset import load_sequence, load_synthetic
from drnnvo.driftnet import load_model
from drnnvo.errors import (
    AlignmentMismatch,
    DegenerateScene,
    ModelFormatError,
    NonFiniteLoss,
)
from drnnvo.pipeline import Trajectory

SMALL = {"n_frames": 10, "n_points": 120, "pixel_noise_sigma": 0.3, "mismatch_rate": 0.1,
         "yaw_wave_deg": 1.0, "yaw_wave_period": 8}


def synth(tmp_path, name, cfg=SMALL, seed=0):
    tmp_path.mkdir(parents=True, exist_ok=True)
    f = tmp_path / f"{name}.json"
    f.write_text(json.dumps(cfg))
    assert cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "data" / name),
                     "--seed", str(seed)]) == 0
    return tmp_path / "data"


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture
def epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


# -- synth ---------------------------------------------------------------------------

def test_synth_default_config(tmp_path, epoch):
    assert cli.main(["synth", "--out", str(tmp_path / "d")]) == 0
    seq = load_synthetic(tmp_path / "d")
    assert len(seq) == 100
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 0 and m["timestamp"] == "2023-11-14T22:13:20Z"
    assert m["config"]["n_points"] == 200


def test_synth_degenerate_exit_5(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"n_points": 5, "mismatch_rate": 0.99}))
    assert cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "d")]) == 5
    assert "n_points" in capsys.readouterr().err


def test_synth_bad_config_exit_2(tmp_path):
    f = tmp_path / "c.json"
    f.write_text("{oops")
    assert cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "d")]) == 2
    f.write_text(json.dumps({"n_frame": 3}))
    assert cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "d")]) == 2


def test_synth_deterministic(tmp_path, epoch):
    a = synth(tmp_path / "a", "s")
    b = synth(tmp_path / "b", "s")
    ta, tb = tree(a / "s"), tree(b / "s")
    # the manifest records the config path, which differs between the two runs
    ma, mb = json.loads(ta.pop("manifest.json")), json.loads(tb.pop("manifest.json"))
    assert ta == tb and ma["config"] == mb["config"] and ma["timestamp"] == mb["timestamp"]


# -- run-vo ------------------------------------------------------------------------------

def test_run_vo_synthetic(tmp_path, epoch):
    data = synth(tmp_path, "s")
    out = tmp_path / "run"
    assert cli.main(["run-vo", "--dataset", str(data), "--sequence", "s", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "traj_s_raw.csv"]
    traj = Trajectory.load(out / "traj_s_raw.csv")
    assert traj.frames == list(range(10))
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "run-vo" and man["config"]["options"]["msac"]["max_iterations"] == 2000
    assert any(k.endswith("poses.txt") for k in man["inputs"])
    out2 = tmp_path / "run2"
    cli.main(["run-vo", "--dataset", str(data), "--sequence", "s", "--out", str(out2)])
    assert (out / "traj_s_raw.csv").read_bytes() == (out2 / "traj_s_raw.csv").read_bytes()


def test_run_vo_missing_sequence(tmp_path, capsys):
    code = cli.main(["run-vo", "--dataset", str(tmp_path), "--sequence", "05",
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(tmp_path / "sequences" / "05") in capsys.readouterr().err


def test_run_vo_bad_model_exit_3(tmp_path):
    data = synth(tmp_path, "s")
    (tmp_path / "m.json").write_text("[]")
    code = cli.main(["run-vo", "--dataset", str(data), "--sequence", "s", "--model",
                     str(tmp_path / "m.json"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_run_vo_test_portion(tmp_path):
    data = synth(tmp_path, "s")
    out = tmp_path / "o"
    cli.main(["run-vo", "--dataset", str(data), "--sequence", "s", "--portion", "test",
              "--out", str(out)])
    assert Trajectory.load(out / "traj_s_raw.csv").frames == [6, 7, 8, 9]


# -- train --------------------------------------------------------------------------------------

def test_train_smoke_and_split(tmp_path, epoch):
    data = synth(tmp_path, "a", seed=1)
    synth(tmp_path, "b", seed=2)
    model = tmp_path / "m" / "model.json"
    args = ["train", "--dataset", str(data), "--sequences", "a,b", "--split", "0.6",
            "--epochs", "5", "--out", str(model), "--seed", "3"]
    assert cli.main(args) == 0
    m = load_model(model)
    # two 10-frame sequences -> two 6-frame portions -> 5 increments each
    assert m.metadata["n_samples"] == 10 and m.metadata["sequences"] == ["a", "b"]
    assert m.metadata["epochs"] <= 5
    rep = (tmp_path / "m" / "model_report.csv").read_text().splitlines()
    assert rep[0].startswith("epoch,") and len(rep) == m.metadata["epochs"] + 2
    first = tree(tmp_path / "m")
    assert cli.main(args) == 0
    assert tree(tmp_path / "m") == first


def test_train_full_sequences(tmp_path):
    data = synth(tmp_path, "a", {**SMALL, "n_frames": 12})
    model = tmp_path / "model.json"
    assert cli.main(["train", "--dataset", str(data), "--full-sequences", "a",
                     "--epochs", "2", "--out", str(model)]) == 0
    assert load_model(model).metadata["n_samples"] == 11


def test_train_missing_gt_exit_2(tmp_path):
    data = synth(tmp_path, "a")
    (data / "a" / "poses.txt").unlink()
    assert cli.main(["train", "--dataset", str(data), "--sequences", "a",
                     "--out", str(tmp_path / "m.json")]) == 2


def test_train_too_few_samples_exit_4(tmp_path):
    data = synth(tmp_path, "a")
    assert cli.main(["train", "--dataset", str(data), "--sequences", "a",
                     "--out", str(tmp_path / "m.json")]) == 4


def test_train_needs_sequences(tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path / "m")]) == 2


# -- eval --------------------------------------------------------------------------------------------

def _gt_file(data, seq_id, path):
    seq = load_sequence(data, seq_id)
    Trajectory.from_poses(seq.gt_poses).save(path)
    return path


def test_eval_gt_is_zero(tmp_path):
    data = synth(tmp_path, "s")
    gt = _gt_file(data, "s", tmp_path / "traj_s_gt.csv")
    assert cli.main(["eval", "--traj", str(gt), "--gt-dataset", str(data), "--sequence", "s",
                     "--out", str(tmp_path / "e")]) == 0
    row = (tmp_path / "e" / "summary.csv").read_text().splitlines()[1].split(",")
    assert row[:2] == ["s", "gt"] and float(row[2]) < 1e-6 and float(row[3]) < 1e-8


def test_eval_two_variants_and_test_portion(tmp_path, epoch):
    data = synth(tmp_path, "s")
    gt = _gt_file(data, "s", tmp_path / "traj_s_gt.csv")
    cli.main(["run-vo", "--dataset", str(data), "--sequence", "s", "--out", str(tmp_path)])
    args = ["eval", "--traj", str(tmp_path / "traj_s_raw.csv"), str(gt), "--gt-dataset",
            str(data), "--sequence", "s", "--test-portion", "--out", str(tmp_path / "e")]
    assert cli.main(args) == 0
    rows = (tmp_path / "e" / "summary.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["raw", "gt"]
    errs = (tmp_path / "e" / "errors_s_raw.csv").read_text().splitlines()
    assert [int(r.split(",")[0]) for r in errs[1:]] == [6, 7, 8, 9]
    first = tree(tmp_path / "e")
    assert cli.main(args) == 0 and tree(tmp_path / "e") == first


def test_eval_mismatch_exit_2(tmp_path):
    data = synth(tmp_path, "s")
    seq = load_sequence(data, "s")
    Trajectory.from_poses(seq.gt_poses[:-1]).save(tmp_path / "short.csv")
    assert cli.main(["eval", "--traj", str(tmp_path / "short.csv"), "--gt-dataset", str(data),
                     "--sequence", "s", "--out", str(tmp_path / "e")]) == 2


# -- exit codes --------------------------------------------------------------------------------------

@pytest.mark.parametrize("exc,code", [(AlignmentMismatch("x"), 2), (ModelFormatError("x"), 3),
                                      (NonFiniteLoss("x"), 4), (DegenerateScene("x"), 5),
                                      (OSError("x"), 2)])
def test_exit_code_map(exc, code):
    assert cli.exit_code(exc) == code


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as e:
        cli.main(["run-vo"])
    assert e.value.code == 2


def test_console_script_entry():
    assert shutil.which("drnnvo") is not None
