import os
from pathlib import Path

import pytest

from latentlab.errors import ConfigError, TaskMismatchError
from latentlab.harness import (
    build_model,
    build_task,
    compare_runs,
    execute_run,
    parse_config,
    resolve_out_dir,
    resolved_text,
    write_report,
)

BASE = """
task:
  kind: tag
  n_prompts: 3
  n_responses: 6
  seed: 1
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


def test_parse_fixed_point():
    cfg = parse_config(BASE)
    text = resolved_text(cfg)
    again = parse_config(text)
    assert resolved_text(again) == text


def test_parse_fills_defaults():
    cfg = parse_config(BASE)
    assert cfg.data["model"]["scale"] == 0.5
    assert cfg.data["mstep"]["steps"] == 50
    assert cfg.data["event"] == "success"


def test_parse_rejects_unknown_key():
    with pytest.raises(ConfigError):
        parse_config(BASE + "\nbogus_key: 1\n")


def test_parse_rejects_unknown_algorithm():
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("algorithm: em", "algorithm: sgd"))


def test_parse_rejects_bad_task_field():
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("n_responses: 6", "n_responses: 6\n  digits: 1"))


def test_parse_rejects_duplicate_seeds():
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("seeds: [0]", "seeds: [0, 0]"))


def test_parse_rejects_non_mapping():
    with pytest.raises(ConfigError):
        parse_config("- just\n- a\n- list\n")


def test_build_task_dispatch():
    carry_cfg = parse_config(
        BASE.replace(
            "task:\n  kind: tag\n  n_prompts: 3\n  n_responses: 6\n  seed: 1",
            "task:\n  kind: carry\n  digits: 1\n  base: 3\n  seed: 0",
        )
    )
    task = build_task(carry_cfg.data["task"])
    assert task.n_prompts == 9
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("kind: tag", "kind: sudoku"))


def test_build_model_shapes():
    cfg = parse_config(BASE)
    task = build_task(cfg.data["task"])
    uni = build_model(cfg.data["model"], task, seed=0)
    assert (uni.theta == 0).all()
    rnd_cfg = parse_config(BASE.replace("init: uniform", "init: random"))
    rnd = build_model(rnd_cfg.data["model"], task, seed=0)
    assert (rnd.theta != 0).any()


def test_execute_run_artifacts(tmp_path):
    cfg = parse_config(BASE)
    out = tmp_path / "run"
    summary = execute_run(cfg, out)
    assert "algorithm=em" in summary
    assert (out / "config.resolved").read_text() == resolved_text(cfg)
    assert (out / "record.seed0.tsv").exists()
    assert (out / "summary.txt").exists()


def test_execute_run_deterministic(tmp_path):
    cfg = parse_config(BASE)
    a, b = tmp_path / "a", tmp_path / "b"
    execute_run(cfg, a)
    execute_run(cfg, b)
    assert (a / "record.seed0.tsv").read_bytes() == (b / "record.seed0.tsv").read_bytes()


def test_parallel_matches_serial(tmp_path):
    cfg = parse_config(BASE.replace("seeds: [0]", "seeds: [0, 1, 2]"))
    a, b = tmp_path / "serial", tmp_path / "par"
    execute_run(cfg, a, jobs=1)
    execute_run(cfg, b, jobs=3)
    for k in (0, 1, 2):
        assert (a / f"record.seed{k}.tsv").read_bytes() == (
            b / f"record.seed{k}.tsv"
        ).read_bytes()


def test_checkpoints_written(tmp_path):
    cfg = parse_config(BASE + "checkpoint_every: 1\n")
    out = tmp_path / "run"
    execute_run(cfg, out)
    for t in (0, 1, 2):
        assert (out / f"checkpoint.seed0.t{t}.txt").exists()


def test_compare_runs(tmp_path):
    cfg_a = parse_config(BASE)
    cfg_b = parse_config(BASE.replace("algorithm: em", "algorithm: filter_sft"))
    a, b = tmp_path / "a", tmp_path / "b"
    execute_run(cfg_a, a)
    execute_run(cfg_b, b)
    table = compare_runs([a, b])
    assert "em" in table and "filter_sft" in table
    assert "wins=" in table


def test_compare_guards_task_mismatch(tmp_path):
    cfg_a = parse_config(BASE)
    cfg_b = parse_config(BASE.replace("n_responses: 6", "n_responses: 5"))
    a, b = tmp_path / "a", tmp_path / "b"
    execute_run(cfg_a, a)
    execute_run(cfg_b, b)
    with pytest.raises(TaskMismatchError):
        compare_runs([a, b])


def test_report_series(tmp_path):
    cfg = parse_config(BASE.replace("seeds: [0]", "seeds: [0, 1]"))
    out = tmp_path / "run"
    execute_run(cfg, out)
    files = write_report(out)
    names = {p.name for p in files}
    assert "series.objective.tsv" in names
    obj = Path(out, "series.objective.tsv").read_text().splitlines()
    assert obj[0] == "t\tseed0\tseed1\tmean"
    assert len(obj) == 1 + 3
    # a second report pass rewrites the same bytes
    before = Path(out, "series.objective.tsv").read_bytes()
    write_report(out)
    assert Path(out, "series.objective.tsv").read_bytes() == before


def test_resolve_out_dir_precedence(tmp_path, monkeypatch):
    cfg = parse_config(BASE)
    explicit = resolve_out_dir(cfg, str(tmp_path / "x"), "cfgname")
    assert explicit == tmp_path / "x"
    cfg_with_out = parse_config(BASE + f"out: {tmp_path / 'y'}\n")
    assert resolve_out_dir(cfg_with_out, None, "cfgname") == tmp_path / "y"
    monkeypatch.setenv("LATENTLAB_OUT", str(tmp_path / "env"))
    assert resolve_out_dir(cfg, None, "cfgname") == tmp_path / "env" / "cfgname"
    monkeypatch.delenv("LATENTLAB_OUT")
    assert resolve_out_dir(cfg, None, "cfgname") == Path("runs") / "cfgname"
