import csv
import json

import numpy as np
import pytest

from rbplan.cli import blob_hash, main

TINY_TRAIN = ["--K", "4", "--H", "3", "--epochs", "2", "--steps-per-epoch", "2", "--batch-size", "4",
              "--base-channels", "8", "--step-embed-dim", "8", "--cond-embed-dim", "8",
              "--state-embed-dim", "8", "--action-embed-dim", "4"]
QUICK_EVAL = ["--seeds", "0", "1", "2", "--episodes", "5", "--frames", "4"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-dataset", "--out", str(root / "ds"), "--seed", "3", "--n-episodes", "2",
                 "--episode-len", "8", "--horizon", "3"]) == 0
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(root / "run"), *TINY_TRAIN]) == 0
    return root


def test_blob_hash_matches_git():
    # `printf hello | git hash-object --stdin`
    assert blob_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"


def test_gen_dataset_manifest_and_replay(workdir):
    man = json.loads((workdir / "ds" / "manifest.json").read_text())
    assert man["command"] == "gen-dataset" and man["seed"] == 3
    assert {"meta.json", "trajectories.jsonl"} <= set(man["artifacts"])
    assert main(["gen-dataset", "--out", str(workdir / "ds2"), "--seed", "3", "--n-episodes", "2",
                 "--episode-len", "8", "--horizon", "3"]) == 0
    again = json.loads((workdir / "ds2" / "manifest.json").read_text())
    assert again["content_hash"] == man["content_hash"]


def test_gen_dataset_rejects_single_frame_episodes(tmp_path, capsys):
    assert main(["gen-dataset", "--out", str(tmp_path / "x"), "--episode-len", "1"]) == 2
    assert "episode_len" in capsys.readouterr().err


def test_train_outputs(workdir):
    rows = read_csv(workdir / "run" / "losses.csv")
    assert list(rows[0]) == ["epoch", "diffusion_loss", "invdyn_loss", "ood_penalty", "total"]
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert (workdir / "run" / "model" / "checkpoint.json").exists()
    man = json.loads((workdir / "run" / "manifest.json").read_text())
    assert man["config"]["K"] == 4 and man["input_hash"]


def test_train_resume_reproduces_full_run(workdir, tmp_path):
    args = ["train", "--dataset", str(workdir / "ds"), *TINY_TRAIN]
    assert main(args[:3] + ["--out", str(tmp_path / "half")] + args[3:] + ["--epochs", "1"]) == 0
    assert main(args[:3] + ["--out", str(tmp_path / "half")] + args[3:] + ["--resume"]) == 0
    assert read_csv(tmp_path / "half" / "losses.csv") == read_csv(workdir / "run" / "losses.csv")


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_evaluate_baseline_rows_and_summary(tmp_path):
    assert main(["evaluate", "--policy", "uniform", "--out", str(tmp_path / "ev"), *QUICK_EVAL]) == 0
    rows = read_csv(tmp_path / "ev" / "episodes.csv")
    assert len(rows) == 15
    rewards = np.array([float(r["reward"]) for r in rows])
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["reward_mean"] == pytest.approx(rewards.mean())
    assert summary["reward_std"] == pytest.approx(rewards.std())
    assert len(read_csv(tmp_path / "ev" / "frames.csv")) == 15 * 4


def test_evaluate_planner_reports_time_per_action(workdir, tmp_path):
    assert main(["evaluate", "--checkpoint", str(workdir / "run"), "--out", str(tmp_path / "ev"),
                 "--sampler", "ddim:2", *QUICK_EVAL]) == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["n_episodes"] == 15 and summary["time_per_action"] > 0
    assert main(["evaluate", "--out", str(tmp_path / "ev2"), *QUICK_EVAL]) == 2  # no checkpoint


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("policy: oracle\nepisodes: 2\nframes: 3\nseeds: [5]\n")
    assert main(["evaluate", "--config", str(cfg), "--episodes", "1", "--out", str(tmp_path / "ev")]) == 0
    man = json.loads((tmp_path / "ev" / "manifest.json").read_text())
    assert man["config"]["policy"] == "oracle" and man["config"]["episodes"] == 1
    assert len(read_csv(tmp_path / "ev" / "episodes.csv")) == 1


def test_verify_theory_vacuous_and_small_sigma(tmp_path):
    assert main(["verify-theory", "--queries", "0", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "theory_report.json").read_text())
    assert rep["ok"] and rep["checks"] == {}
    assert main(["verify-theory", "--instances", "5", "--queries", "50", "--sigma", "1e-6",
                 "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "theory_report.json").read_text())
    assert rep["checks"]["sigma_limit"]["violations"] == 0


def test_sweep_reuses_checkpoint(workdir, tmp_path):
    assert main(["sweep", "--dataset", str(workdir / "ds"), "--checkpoint", str(workdir / "run"),
                 "--axis", "omega", "--values", "1.2", "2.0", "--sampler", "ddim:2", *TINY_TRAIN,
                 "--seeds", "0", "--episodes", "1", "--frames", "2", "--out", str(tmp_path / "sw")]) == 0
    rows = read_csv(tmp_path / "sw" / "sweep.csv")
    assert [r["value"] for r in rows] == ["1.2", "2.0"]
    assert {"time_per_action", "reward_std"} <= set(rows[0])
    assert main(["sweep", "--dataset", str(workdir / "ds"), "--axis", "bogus", "--values", "1",
                 "--out", str(tmp_path / "bad")]) == 2


def test_bc_baseline_then_evaluate(workdir, tmp_path):
    assert main(["bc-baseline", "--dataset", str(workdir / "ds"), "--out", str(tmp_path / "bc"),
                 "--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "8", "--state-embed-dim", "8"]) == 0
    assert main(["evaluate", "--policy", "bc", "--checkpoint", str(tmp_path / "bc"),
                 "--out", str(tmp_path / "ev"), *QUICK_EVAL]) == 0
    assert len(read_csv(tmp_path / "ev" / "episodes.csv")) == 15
