import json
import os
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from oracles import scalar_score, two_point_pca
from xdex.cli import main, verify_manifest
from xdex.eigengrasp import compute_basis, explained_fraction, load_basis
from xdex.formats import read_poses, write_poses

GOLDEN = resources.files("xdex") / "data" / "golden_rollout.jsonl"


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CROSSDEX_SEED", raising=False)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_synth_single_row():
    assert run("synth-dataset", "--n", 1, "--out", "one.bin") == 0
    raw = open("one.bin", "rb").read()
    assert raw[:8] == b"XDEXPOSE" and int.from_bytes(raw[8:12], "little") == 1
    assert read_poses("one.bin").shape == (1, 45)


def test_synth_rank5_captured():
    run("synth-dataset", "--n", 10_000, "--rank", 5, "--seed", 2, "--out", "p.bin")
    X = read_poses("p.bin")
    assert explained_fraction(compute_basis(X, k=5), X) >= 0.9999


def test_synth_seed_env_override(monkeypatch):
    run("synth-dataset", "--n", 5, "--seed", 7, "--out", "a.bin")
    monkeypatch.setenv("CROSSDEX_SEED", "7")
    run("synth-dataset", "--n", 5, "--out", "b.bin")
    assert open("a.bin", "rb").read() == open("b.bin", "rb").read()


def test_synth_rejects_zero_rows():
    assert run("synth-dataset", "--n", 0, "--out", "z.bin") == 2


def test_eigengrasp_two_point_csv(capsys):
    rng = np.random.default_rng(0)
    p = rng.normal(0, 0.3, size=(2, 45))
    with open("two.csv", "w") as fh:
        for row in p:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    assert run("eigengrasp", "--dataset", "two.csv", "--k", 1, "--out", "b.json") == 0
    comp, ev = two_point_pca(*p)
    b = load_basis("b.json")
    assert np.allclose(b.components[0], comp, atol=1e-10)
    assert abs(b.eigenvalues[0] - ev) < 1e-10
    assert stdout_json(capsys)["eigenvalues"] == b.eigenvalues.tolist()
    assert verify_manifest("b.json.manifest.json")


def test_eigengrasp_k_out_of_range(capsys):
    write_poses("p.bin", np.zeros((60, 45)))
    assert run("eigengrasp", "--dataset", "p.bin", "--k", 46, "--out", "b.json") == 2


def test_eigengrasp_bad_magic(capsys):
    open("bad.bin", "wb").write(b"NOTPOSES" + bytes(64))
    assert run("eigengrasp", "--dataset", "bad.bin", "--k", 2, "--out", "b.json") == 3
    assert "XDEXPOSE" in capsys.readouterr().err


def test_eigengrasp_csv_error_reports_line(capsys):
    open("bad.csv", "w").write(",".join(["0"] * 45) + "\n" + ",".join(["0"] * 44) + "\n")
    assert run("eigengrasp", "--dataset", "bad.csv", "--k", 1, "--out", "b.json") == 3
    assert "bad.csv:2" in capsys.readouterr().err


@pytest.fixture
def stream_setup():
    run("synth-dataset", "--n", 2000, "--rank", 5, "--seed", 1, "--out", "p.bin")
    run("eigengrasp", "--dataset", "p.bin", "--k", 5, "--out", "basis.json")
    with open("stream.jsonl", "w") as fh:
        for t in range(15):
            fh.write(json.dumps({"t": t, "weights": [0.2, -0.1, 0.05, 0.0, 0.1]}) + "\n")


def test_retarget_constant_stream_converges(stream_setup, capsys):
    capsys.readouterr()
    assert run("retarget", "--basis", "basis.json", "--hand", "four_finger", "--stream",
               "stream.jsonl", "--out", "traj.jsonl", "--smoothness", 1e-4) == 0
    summary = stdout_json(capsys)
    assert summary["final_delta"] < 1e-6 and summary["steps"] == 15
    rows = [json.loads(l) for l in open("traj.jsonl")]
    assert all(set(r) == {"t", "q", "objective", "iterations", "delta"} for r in rows)
    assert verify_manifest("traj.jsonl.manifest.json")


def test_retarget_objective_flag_routing(stream_setup, capsys):
    finals = {}
    for obj in ("position", "dexpilot"):
        capsys.readouterr()
        assert run("retarget", "--basis", "basis.json", "--hand", "five_finger", "--stream",
                   "stream.jsonl", "--out", f"{obj}.jsonl", "--objective", obj) == 0
        summary = stdout_json(capsys)
        assert summary["objective"] == obj
        finals[obj] = summary["final_objective"]
    assert finals["position"] != finals["dexpilot"]


def test_retarget_keypoint_stream(stream_setup, skeleton):
    from xdex.pose_model import hand_keypoints
    kp = hand_keypoints(skeleton, np.zeros(45))
    with open("kp.jsonl", "w") as fh:
        fh.write(json.dumps({"t": 0, "keypoints": kp.tolist()}) + "\n")
    assert run("retarget", "--basis", "basis.json", "--hand", "four_finger", "--stream",
               "kp.jsonl", "--out", "o.jsonl") == 0


def test_retarget_errors(stream_setup, capsys):
    with open("short.jsonl", "w") as fh:
        fh.write(json.dumps({"t": 0, "weights": [0.1, 0.2]}) + "\n")
    assert run("retarget", "--basis", "basis.json", "--hand", "four_finger", "--stream",
               "short.jsonl", "--out", "o.jsonl") == 2
    assert run("retarget", "--basis", "basis.json", "--hand", "four_finger", "--stream",
               "stream.jsonl", "--out", "o.jsonl", "--backend", "surrogate") == 2
    assert "--weights" in capsys.readouterr().err


def test_train_surrogate_smoke_profile(capsys):
    run("synth-dataset", "--n", 5000, "--seed", 3, "--out", "p.bin")
    capsys.readouterr()
    args = ["train-surrogate", "--hand", "four_finger", "--poses", "p.bin", "--epochs", 20]
    assert run(*args, "--out", "w1.json", "--seed", 5) == 0
    summary = stdout_json(capsys)
    lines = open("w1.loss.csv").read().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse" and len(lines) < 20 + 2
    losses = [float(l.split(",")[1]) for l in lines[1:]]
    assert losses[-1] < losses[0]
    assert summary["final_train_mse"] < summary["initial_train_mse"]
    assert verify_manifest("w1.json.manifest.json") and verify_manifest("w1.loss.csv.manifest.json")

    assert run(*args, "--out", "w2.json", "--seed", 5) == 0
    assert open("w1.json", "rb").read() == open("w2.json", "rb").read()

    # the trained weights drive the surrogate backends
    assert run("eval-surrogate", "--hand", "four_finger", "--weights", "w1.json", "--n", 50) == 0
    capsys.readouterr()
    run("eigengrasp", "--dataset", "p.bin", "--k", 5, "--out", "basis.json")
    with open("s.jsonl", "w") as fh:
        fh.write(json.dumps({"t": 0, "weights": [0.1] * 5}) + "\n")
    assert run("retarget", "--basis", "basis.json", "--hand", "four_finger", "--stream", "s.jsonl",
               "--out", "o.jsonl", "--backend", "surrogate", "--weights", "w1.json") == 0


def test_train_surrogate_empty_dataset(capsys):
    write_poses("empty.bin", np.zeros((0, 45)))
    assert run("train-surrogate", "--hand", "four_finger", "--poses", "empty.bin",
               "--out", "w.json") == 2


def test_score_golden(capsys):
    lines = GOLDEN.read_text().splitlines()
    for mode, n in (("test", 30), ("train", 60)):
        capsys.readouterr()
        assert run("score", "--rollout", GOLDEN, "--mode", mode, "--out", f"{mode}.json") == 0
        total, success, steps = scalar_score(lines, n)
        out = json.load(open(f"{mode}.json"))
        assert out == stdout_json(capsys)
        assert out["total_reward"] == pytest.approx(total, abs=1e-9)
        assert (out["success"], out["steps"]) == (success, steps)


def test_score_45_step_run(capsys):
    rec = {"palm": [0, 0, 0.7], "tips": [[0.05, 0, 0.6], [-0.05, 0, 0.6]],
           "object_center": [0, 0, 0.6], "object_xy0": [0, 0]}
    with open("r.jsonl", "w") as fh:
        for t in range(45):
            fh.write(json.dumps({"t": t, **rec}) + "\n")
    results = {}
    for mode in ("test", "train"):
        capsys.readouterr()
        run("score", "--rollout", "r.jsonl", "--mode", mode)
        results[mode] = stdout_json(capsys)["success"]
    assert results == {"test": True, "train": False}


def test_score_errors(capsys):
    open("empty.jsonl", "w").close()
    assert run("score", "--rollout", "empty.jsonl") == 3
    with open("bad.jsonl", "w") as fh:
        fh.write(json.dumps({"palm": [0, 0, 0], "tips": [[0, 0, 0]], "object_center": [0, 0, 0],
                             "object_xy0": [0, 0]}) + "\n")
        fh.write(json.dumps({"palm": [0, 0]}) + "\n")
    capsys.readouterr()
    assert run("score", "--rollout", "bad.jsonl") == 3
    assert "bad.jsonl:2" in capsys.readouterr().err


def test_fk_command(capsys, four):
    assert run("fk", "--hand", "four_finger", "--q", ",".join(["0"] * 8)) == 0
    out = stdout_json(capsys)
    assert out["palm"] == pytest.approx([0, 0, 0.03])
    assert set(out["tips"]) == set(four.finger_tags)
    assert run("fk", "--hand", "four_finger", "--q", "0,0") == 2


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["retarget"])
    assert exc.value.code == 2
    assert run("fk", "--hand", "missing_hand.json") == 3


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "xdex.cli", "fk", "--hand", "five_finger"],
                         capture_output=True, text=True, check=True)
    assert len(json.loads(out.stdout)["tips"]) == 5


def _fk_under(flag):
    env = dict(os.environ, XDEX_KERNELS=flag)
    return subprocess.run([sys.executable, "-m", "xdex.cli", "fk", "--hand", "five_finger"],
                          env=env, capture_output=True, text=True)


def test_kernel_flag_selects_backend():
    a, b = _fk_under("numba"), _fk_under("numpy")
    assert a.returncode == b.returncode == 0
    pa, pb = json.loads(a.stdout), json.loads(b.stdout)
    assert pa["tips"].keys() == pb["tips"].keys()
    for tag in pa["tips"]:
        assert np.allclose(pa["tips"][tag], pb["tips"][tag], atol=1e-12)
    assert _fk_under("cuda").returncode != 0
