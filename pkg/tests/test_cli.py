"""End-to-end CLI smoke tests with tiny settings."""

import csv
import json
from pathlib import Path

import pytest

from mdlab.cli import main
from mdlab.util import read_jsonl, write_jsonl


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "data.jsonl"
    rc = main(["gen-data", "--task", "countdown", "--count", "12",
               "--seed", "0", "--out", str(path)])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset):
    ck = workdir / "sft"
    rc = main(["train-sft", "--data", str(dataset), "--out", str(ck),
               "--steps", "3", "--batch", "4", "--d-model", "16",
               "--layers", "1", "--heads", "2", "--len", "16"])
    assert rc == 0
    return ck


class TestGenData:
    def test_output_and_config_dump(self, dataset):
        items = read_jsonl(dataset)
        assert len(items) == 12
        cfg = json.loads(Path(str(dataset).replace(".jsonl", ".config.json")).read_text())
        assert cfg["task"] == "countdown"
        assert cfg["seed"] == 0

    def test_deterministic(self, workdir, dataset):
        again = workdir / "data2.jsonl"
        main(["gen-data", "--task", "countdown", "--count", "12",
              "--seed", "0", "--out", str(again)])
        assert read_jsonl(again) == read_jsonl(dataset)


class TestTrainSft:
    def test_checkpoint_files(self, checkpoint):
        assert (checkpoint.parent / "sft.json").exists()
        assert (checkpoint.parent / "sft.bin").exists()
        assert (checkpoint.parent / "sft.train.jsonl").exists()


class TestDecode:
    def test_trajectory_written(self, workdir, checkpoint, dataset):
        items = read_jsonl(dataset)
        out = workdir / "traj.jsonl"
        rc = main(["decode", "--checkpoint", str(checkpoint),
                   "--prompt", items[0]["prompt"], "--strategy", "rcr",
                   "--schedule", "cosine", "--steps", "4", "--len", "8",
                   "--out", str(out)])
        assert rc == 0
        lines = read_jsonl(out)
        assert "meta" in lines[0]
        assert len(lines) == 5  # header + 4 steps

    def test_bad_schedule_is_config_error(self, workdir, checkpoint):
        rc = main(["decode", "--checkpoint", str(checkpoint),
                   "--prompt", "1+2=", "--schedule", "nope",
                   "--steps", "4", "--len", "8",
                   "--out", str(workdir / "x.jsonl")])
        assert rc == 1

    def test_missing_checkpoint_is_runtime_error(self, workdir):
        rc = main(["decode", "--checkpoint", str(workdir / "absent"),
                   "--prompt", "1+2=", "--steps", "4", "--len", "8",
                   "--out", str(workdir / "x.jsonl")])
        assert rc == 2


class TestTrainMdpo:
    def test_short_run(self, workdir, checkpoint, dataset):
        out = workdir / "mdpo"
        rc = main(["train-mdpo", "--init", str(checkpoint),
                   "--data", str(dataset), "--out", str(out),
                   "--group", "2", "--steps-rollout", "4", "--block", "4",
                   "--updates", "1", "--batch-prompts", "2", "--len", "8"])
        assert rc == 0
        log = read_jsonl(workdir / "mdpo.metrics.jsonl")
        assert len(log) == 1
        assert "mean_final_reward" in log[0]

    def test_misaligned_steps_is_config_error(self, workdir, checkpoint, dataset):
        rc = main(["train-mdpo", "--init", str(checkpoint),
                   "--data", str(dataset), "--out", str(workdir / "bad"),
                   "--group", "2", "--steps-rollout", "5", "--block", "4",
                   "--updates", "1", "--batch-prompts", "2", "--len", "8"])
        assert rc == 1


class TestFilterBackslide:
    def test_writes_subset(self, workdir, checkpoint, dataset):
        out = workdir / "filtered.jsonl"
        rc = main(["filter-backslide", "--checkpoint", str(checkpoint),
                   "--data", str(dataset), "--steps", "4", "--len", "8",
                   "--out", str(out)])
        assert rc == 0
        kept = read_jsonl(out)
        full = read_jsonl(dataset)
        assert len(kept) <= len(full)
        prompts = {it["prompt"] for it in full}
        assert all(it["prompt"] in prompts for it in kept)


class TestAnalyze:
    def test_csv_reports(self, workdir):
        rewards = workdir / "rewards.jsonl"
        write_jsonl(rewards, [
            {"traj_id": "a", "mode": "pure-diff", "rewards": [0, 1, 0]},
            {"traj_id": "b", "mode": "semi-ar", "rewards": [0, 0, 1]},
        ])
        out = workdir / "analysis.csv"
        rc = main(["analyze", "--rewards", str(rewards), "--bins", "3",
                   "--out", str(out)])
        assert rc == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert [r["backslide"] for r in rows] == ["1", "0"]
        assert (workdir / "analysis_hist.csv").exists()


class TestEvalGrid:
    def test_grid_csv(self, workdir, checkpoint, dataset):
        out = workdir / "grid.csv"
        rc = main(["eval", "--checkpoint", str(checkpoint),
                   "--data", str(dataset), "--out", str(out),
                   "--strategies", "lcr,rcr", "--schedules", "linear",
                   "--blocks", "0", "--steps-list", "4,8", "--len", "8"])
        assert rc == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        for row in rows:
            total = float(row["accuracy"]) + float(row["backslide_rate"])
            assert float(row["acc_with_intermediate"]) == pytest.approx(total)
