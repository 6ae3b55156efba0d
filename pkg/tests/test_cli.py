import csv
import subprocess
import sys

import pytest
import yaml

from fxdl import harness
from fxdl.cli import main


@pytest.fixture
def run(tmp_path, monkeypatch, tiny_dict, fresh_memo):
    out = tmp_path / "out"
    monkeypatch.setenv("FXDL_OUT", str(out))
    cfg_path = tmp_path / "cfg.yaml"

    def _run(*argv, cfg=None):
        cfg_path.write_text(yaml.safe_dump(cfg or tiny_dict))
        harness.clear_memo()
        return main([argv[0], "--config", str(cfg_path), *argv[1:]])

    _run.out = out
    return _run


def test_full_workflow(run):
    assert run("train-teacher") == 0
    assert (run.out / "teacher.ckpt").exists() and (run.out / "config.yaml").exists()
    assert run("distill", "--stage", "1") == 0
    assert run("profile-cache", "--model", "stage1") == 0
    assert run("distill", "--stage", "2") == 0
    assert run("sample", "--steps", "2", "--n", "20") == 0
    assert run("eval") == 0
    with open(run.out / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and rows[-1]["effective_nfe"] == "2.0"
    with open(run.out / "stage2.csv") as fh:
        assert next(csv.reader(fh))[:4] == ["iter", "L_G", "L_D", "cache_gap"]


def test_usage_errors_exit_two(run, tiny_dict):
    assert main([]) == 2
    assert main(["distill"]) == 2
    assert main(["distill", "--stage", "3"]) == 2
    assert main(["ablate", "--preset", "nope"]) == 2
    tiny_dict["stage1"]["bogus"] = 1
    assert run("train-teacher", cfg=tiny_dict) == 2


def test_missing_checkpoint_exits_one(run):
    assert run("distill", "--stage", "1") == 1


def test_numeric_failure_exits_three(run, tiny_dict):
    tiny_dict["teacher"]["lr"] = 1e30
    assert run("train-teacher", cfg=tiny_dict) == 3


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fxdl.cli", "distill", "--stage", "9"], capture_output=True,
                       text=True, env={"FXDL_OUT": str(tmp_path), "PATH": ""})
    assert r.returncode == 2 and "error" in r.stderr
