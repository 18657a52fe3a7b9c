from pathlib import Path

import pytest

from latentlab.cli import main

CONFIG = """
task:
  kind: tag
  n_prompts: 2
  n_responses: 5
  seed: 0
event: success
model:
  features: tabular
  init: uniform
algorithm: em
iterations: 2
seeds: [0]
estep:
  backend: exact
mstep:
  kind: closed_form
"""


@pytest.fixture()
def config_path(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(CONFIG)
    return p


def test_run_and_report(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(config_path), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert str(out) in printed
    assert (out / "record.seed0.tsv").exists()
    assert main(["report", str(out)]) == 0
    assert (out / "series.objective.tsv").exists()


def test_compare(tmp_path, config_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(config_path), "--out", str(a)]) == 0
    assert main(["run", str(config_path), "--out", str(b)]) == 0
    capsys.readouterr()
    assert main(["compare", str(a), str(b)]) == 0
    assert "wins=" in capsys.readouterr().out


def test_run_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2
    assert capsys.readouterr().err != ""


def test_run_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(CONFIG + "\nbogus_key: 1\n")
    assert main(["run", str(p)]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_verify_single_check(capsys):
    assert main(["verify", "--filter", "tasks.factory_counts"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "1/1" in out


def test_verify_fault_injection(capsys):
    code = main(
        ["verify", "--filter", "planner.shap*", "--inject-fault", "shaping-sign"]
    )
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_verify_unknown_fault(capsys):
    assert main(["verify", "--inject-fault", "no-such-fault"]) == 2


def test_verify_no_match(capsys):
    assert main(["verify", "--filter", "zzz.*"]) == 2
