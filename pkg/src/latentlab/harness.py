"""Config-driven runs: one YAML document in, deterministic artifacts out.

A run directory holds the resolved config, one metric table per seed
(``record.seed<k>.tsv``), optional parameter checkpoints, and a timing
summary.  Everything except ``summary.txt`` is byte-deterministic:
rerunning the same config into a fresh directory reproduces those files
exactly, which is what makes results from different machines comparable.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from io import StringIO
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, TaskMismatchError
from .esteps import EStepSpec, PolicyGradConfig
from .models import (
    LogitModel,
    NgramFeatures,
    TabularFeatures,
    write_checkpoint,
)
from .rng import stream
from .tasks import (
    GenerativeTask,
    full_event,
    make_automaton_trace_task,
    make_carry_addition_task,
    make_reward_tag_task,
    success_event,
)
from .training import (
    TSV_COLUMNS,
    MStepSpec,
    record_from_tsv,
    reference_optimum,
    run_cond_sft,
    run_em,
    run_filter_sft,
    run_pref_loop,
    run_restem,
)

ALGORITHMS = (
    "em",
    "filter_sft",
    "restem",
    "cond_sft",
    "iter_dpo",
    "posterior_dpo",
)

_TASK_REQUIRED = {
    "carry": ("digits", "base"),
    "automaton": ("num_states", "input_len"),
    "tag": ("n_prompts", "n_responses"),
}
_TASK_OPTIONAL = {
    "carry": ("seed", "evaluator", "soft_beta", "wrong_penalty", "prompt_limit"),
    "automaton": ("seed", "evaluator", "soft_beta", "wrong_penalty", "prompt_limit"),
    "tag": ("seed", "evaluator", "soft_beta", "wrong_penalty"),
}
_MODEL_DEFAULTS = {
    "features": "tabular",
    "init": "uniform",
    "scale": 0.5,
    "ngram_n": 2,
    "positional": True,
    "per_prompt": True,
}
_ESTEP_DEFAULTS = {"backend": "exact", "params": {}}
_MSTEP_DEFAULTS = {"kind": "closed_form", "steps": 50, "rate": 0.5}
_DPO_DEFAULTS = {
    "steps": 100,
    "rate": 0.5,
    "beta": 1.0,
    "candidates": 16,
    "pg": None,
}
_PG_FIELDS = (
    "step_size",
    "batch_size",
    "iterations",
    "beta",
    "baseline",
    "reward_floor",
    "divergence_patience",
)
_TOP_FIELDS = (
    "task",
    "event",
    "model",
    "algorithm",
    "iterations",
    "seeds",
    "sample_budget",
    "estep",
    "mstep",
    "dpo",
    "reference",
    "out",
    "checkpoint_every",
)


@dataclass(frozen=True)
class RunConfig:
    """A fully validated and default-filled config, ready to execute."""

    data: dict


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        field = "field" if len(unknown) == 1 else "fields"
        raise ConfigError(
            f"unknown {section} {field} {', '.join(repr(u) for u in unknown)}"
        )


def _as_int(section: str, key: str, value, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{section}.{key} must be >= {minimum}, got {value}")
    return int(value)


def _as_float(section: str, key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
    return float(value)


def _as_bool(section: str, key: str, value) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
    return value


def _normalize_task(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("task must be a mapping with a 'kind'")
    kind = raw.get("kind")
    if kind not in _TASK_REQUIRED:
        raise ConfigError(
            f"task.kind must be one of {sorted(_TASK_REQUIRED)}, got {kind!r}"
        )
    allowed = ("kind",) + _TASK_REQUIRED[kind] + _TASK_OPTIONAL[kind]
    _reject_unknown("task", raw, allowed)
    out: dict = {"kind": kind}
    for key in _TASK_REQUIRED[kind]:
        if key not in raw:
            raise ConfigError(f"task.{key} is required for kind {kind!r}")
        out[key] = _as_int("task", key, raw[key], minimum=1)
    out["seed"] = _as_int("task", "seed", raw.get("seed", 0), minimum=0)
    evaluator = raw.get("evaluator", "binary")
    if evaluator not in ("binary", "soft"):
        raise ConfigError(
            f"task.evaluator must be 'binary' or 'soft', got {evaluator!r}"
        )
    out["evaluator"] = evaluator
    out["soft_beta"] = _as_float("task", "soft_beta", raw.get("soft_beta", 1.0))
    out["wrong_penalty"] = _as_float(
        "task", "wrong_penalty", raw.get("wrong_penalty", -3.0)
    )
    if kind in ("carry", "automaton"):
        limit = raw.get("prompt_limit")
        out["prompt_limit"] = (
            None if limit is None else _as_int("task", "prompt_limit", limit, 1)
        )
    return out


def _normalize_model(raw) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("model must be a mapping")
    _reject_unknown("model", raw, _MODEL_DEFAULTS)
    out = dict(_MODEL_DEFAULTS)
    out.update(raw)
    if out["features"] not in ("tabular", "ngram"):
        raise ConfigError(
            f"model.features must be 'tabular' or 'ngram', got {out['features']!r}"
        )
    if out["init"] not in ("uniform", "random"):
        raise ConfigError(
            f"model.init must be 'uniform' or 'random', got {out['init']!r}"
        )
    out["scale"] = _as_float("model", "scale", out["scale"])
    out["ngram_n"] = _as_int("model", "ngram_n", out["ngram_n"], minimum=1)
    out["positional"] = _as_bool("model", "positional", out["positional"])
    out["per_prompt"] = _as_bool("model", "per_prompt", out["per_prompt"])
    return out


def parse_config(text: str) -> RunConfig:
    """Validate a YAML run description and fill in every default.

    Unknown fields are an error rather than a warning: a silently ignored
    typo (``mstpe:``) would run a different experiment than the one the
    config reads as describing.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid yaml: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a yaml mapping")
    _reject_unknown("config", raw, _TOP_FIELDS)

    if "task" not in raw:
        raise ConfigError("config needs a 'task' section")
    if "algorithm" not in raw:
        raise ConfigError("config needs an 'algorithm'")
    algorithm = raw["algorithm"]
    if algorithm not in ALGORITHMS:
        raise ConfigError(
            f"unknown algorithm {algorithm!r}; available: {', '.join(ALGORITHMS)}"
        )

    data: dict = {"task": _normalize_task(raw["task"]), "algorithm": algorithm}

    event = raw.get("event", "success")
    if event not in ("success", "full"):
        raise ConfigError(f"event must be 'success' or 'full', got {event!r}")
    data["event"] = event

    data["model"] = _normalize_model(raw.get("model"))
    data["iterations"] = _as_int("config", "iterations",
                                 raw.get("iterations", 5), minimum=0)

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers")
    data["seeds"] = [_as_int("config", "seeds", s, minimum=0) for s in seeds]
    if len(set(data["seeds"])) != len(data["seeds"]):
        raise ConfigError("seeds must not repeat")

    data["sample_budget"] = _as_int(
        "config", "sample_budget", raw.get("sample_budget", 100), minimum=1
    )

    estep = dict(_ESTEP_DEFAULTS)
    if raw.get("estep") is not None:
        if not isinstance(raw["estep"], dict):
            raise ConfigError("estep must be a mapping")
        _reject_unknown("estep", raw["estep"], _ESTEP_DEFAULTS)
        estep.update(raw["estep"])
    if not isinstance(estep["params"], dict):
        raise ConfigError("estep.params must be a mapping")
    EStepSpec(estep["backend"], dict(estep["params"]))  # validates the backend
    data["estep"] = {"backend": estep["backend"], "params": dict(estep["params"])}

    mstep = dict(_MSTEP_DEFAULTS)
    if raw.get("mstep") is not None:
        if not isinstance(raw["mstep"], dict):
            raise ConfigError("mstep must be a mapping")
        _reject_unknown("mstep", raw["mstep"], _MSTEP_DEFAULTS)
        mstep.update(raw["mstep"])
    mstep["steps"] = _as_int("mstep", "steps", mstep["steps"], minimum=1)
    mstep["rate"] = _as_float("mstep", "rate", mstep["rate"])
    MStepSpec(mstep["kind"], steps=mstep["steps"], rate=mstep["rate"])
    data["mstep"] = mstep

    dpo = dict(_DPO_DEFAULTS)
    if raw.get("dpo") is not None:
        if not isinstance(raw["dpo"], dict):
            raise ConfigError("dpo must be a mapping")
        _reject_unknown("dpo", raw["dpo"], _DPO_DEFAULTS)
        dpo.update(raw["dpo"])
    dpo["steps"] = _as_int("dpo", "steps", dpo["steps"], minimum=1)
    dpo["rate"] = _as_float("dpo", "rate", dpo["rate"])
    dpo["beta"] = _as_float("dpo", "beta", dpo["beta"])
    dpo["candidates"] = _as_int("dpo", "candidates", dpo["candidates"], minimum=2)
    if dpo["pg"] is not None:
        if not isinstance(dpo["pg"], dict):
            raise ConfigError("dpo.pg must be a mapping")
        _reject_unknown("dpo.pg", dpo["pg"], _PG_FIELDS)
        PolicyGradConfig(**dpo["pg"])  # validates values
    data["dpo"] = dpo

    reference = raw.get("reference", "none")
    if reference not in ("none", "optimum"):
        raise ConfigError(
            f"reference must be 'none' or 'optimum', got {reference!r}"
        )
    data["reference"] = reference

    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"out must be a path string, got {out!r}")
    data["out"] = out

    data["checkpoint_every"] = _as_int(
        "config", "checkpoint_every", raw.get("checkpoint_every", 0), minimum=0
    )
    return RunConfig(data)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical serialization; parsing it back is a fixed point."""
    return yaml.safe_dump(cfg.data, sort_keys=True, default_flow_style=False)


def build_task(tdata: dict) -> GenerativeTask:
    kind = tdata["kind"]
    common = {
        "seed": tdata["seed"],
        "evaluator": tdata["evaluator"],
        "soft_beta": tdata["soft_beta"],
        "wrong_penalty": tdata["wrong_penalty"],
    }
    if kind == "carry":
        return make_carry_addition_task(
            tdata["digits"], tdata["base"],
            prompt_limit=tdata["prompt_limit"], **common,
        )
    if kind == "automaton":
        return make_automaton_trace_task(
            tdata["num_states"], tdata["input_len"],
            prompt_limit=tdata["prompt_limit"], **common,
        )
    return make_reward_tag_task(tdata["n_prompts"], tdata["n_responses"], **common)


def build_model(mdata: dict, task: GenerativeTask, seed: int) -> LogitModel:
    if mdata["features"] == "tabular":
        features = TabularFeatures(task)
    else:
        features = NgramFeatures(
            task, n=mdata["ngram_n"],
            positional=mdata["positional"], per_prompt=mdata["per_prompt"],
        )
    if mdata["init"] == "uniform":
        theta = np.zeros(features.dim)
    else:
        theta = stream(seed, "init").normal(0.0, mdata["scale"], features.dim)
    return LogitModel(features, theta)


def _run_one_seed(args: tuple[dict, int]) -> dict:
    """Worker body; takes plain data so process pools can ship it."""
    data, seed = args
    task = build_task(data["task"])
    model = build_model(data["model"], task, seed)
    event = success_event() if data["event"] == "success" else full_event()
    reference = None
    if data["reference"] == "optimum":
        reference = reference_optimum(model, task, event)

    checkpoints: list[tuple[str, str]] = []
    every = data["checkpoint_every"]

    def hook(t: int, m: LogitModel, row) -> None:
        if every > 0 and t % every == 0:
            buf = StringIO()
            write_checkpoint(m, buf)
            checkpoints.append((f"checkpoint.seed{seed}.t{t}.txt", buf.getvalue()))

    algorithm = data["algorithm"]
    iterations = data["iterations"]
    started = time.perf_counter()
    if algorithm == "em":
        _, record = run_em(
            model, task, event,
            EStepSpec(data["estep"]["backend"], dict(data["estep"]["params"])),
            MStepSpec(data["mstep"]["kind"], steps=data["mstep"]["steps"],
                      rate=data["mstep"]["rate"]),
            iterations=iterations, seed=seed, reference=reference,
            on_iteration=hook,
        )
    elif algorithm == "filter_sft":
        _, record = run_filter_sft(
            model, task, iterations=iterations, budget=data["sample_budget"],
            seed=seed, reference=reference, on_iteration=hook,
        )
    elif algorithm == "restem":
        _, record = run_restem(
            model, task, iterations=iterations, budget=data["sample_budget"],
            seed=seed, reference=reference, on_iteration=hook,
        )
    elif algorithm == "cond_sft":
        _, record = run_cond_sft(
            model, task, iterations=iterations, budget=data["sample_budget"],
            seed=seed, reference=reference, on_iteration=hook,
        )
    else:
        _, record = run_pref_loop(
            model, task, iterations=iterations,
            candidates=data["dpo"]["candidates"], seed=seed,
            sampler="posterior" if algorithm == "posterior_dpo" else "model",
            dpo_steps=data["dpo"]["steps"], dpo_rate=data["dpo"]["rate"],
            dpo_beta=data["dpo"]["beta"], pg_params=data["dpo"]["pg"],
            reference=reference, on_iteration=hook,
        )
    wall_s = time.perf_counter() - started
    final = record.rows[-1]
    return {
        "seed": seed,
        "algorithm": record.algorithm,
        "tsv": record.to_tsv(),
        "checkpoints": checkpoints,
        "flags": list(record.flags),
        "final_objective": final.objective,
        "final_acc_greedy": final.acc_greedy,
        "wall_s": wall_s,
    }


def execute_run(cfg: RunConfig, out_dir: str | Path, jobs: int = 1) -> str:
    """Run every seed of a config into `out_dir` and return the summary.

    Workers receive the config data, not live objects, because evaluator
    closures do not pickle; results are written in seed order regardless
    of completion order so listings stay deterministic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(resolved_text(cfg))
    seeds = cfg.data["seeds"]
    work = [(cfg.data, seed) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_seed, work))
    else:
        results = [_run_one_seed(item) for item in work]

    task_name = build_task(cfg.data["task"]).name
    lines = [
        f"algorithm={cfg.data['algorithm']} task={task_name} "
        f"iterations={cfg.data['iterations']} seeds={len(seeds)}"
    ]
    for res in results:
        (out / f"record.seed{res['seed']}.tsv").write_text(res["tsv"])
        for name, text in res["checkpoints"]:
            (out / name).write_text(text)
        flags = ",".join(res["flags"]) if res["flags"] else "-"
        lines.append(
            f"seed={res['seed']} final_objective={res['final_objective']:.6g} "
            f"final_acc_greedy={res['final_acc_greedy']:.4g} "
            f"flags={flags} wall_s={res['wall_s']:.2f}"
        )
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary)
    return summary


def _load_run(run_dir: Path) -> tuple[dict, dict[int, list]]:
    resolved = run_dir / "config.resolved"
    if not resolved.exists():
        raise ConfigError(f"{run_dir} has no config.resolved; not a run directory")
    data = yaml.safe_load(resolved.read_text())
    records = {}
    for p in sorted(run_dir.glob("record.seed*.tsv")):
        seed = int(p.stem.removeprefix("record.seed"))
        records[seed] = record_from_tsv(p.read_text())
    if not records:
        raise ConfigError(f"{run_dir} holds no metric tables")
    return data, records


def compare_runs(run_dirs: list) -> str:
    """Align final metrics of several runs over one task and event.

    Comparing runs from different tasks or events would rank numbers that
    mean different things, so that is refused outright.
    """
    if len(run_dirs) < 2:
        raise ConfigError("comparison needs at least two run directories")
    loaded = [(Path(d), *_load_run(Path(d))) for d in run_dirs]
    base_dir, base_data, _ = loaded[0]
    for d, data, _ in loaded[1:]:
        if data["task"] != base_data["task"] or data["event"] != base_data["event"]:
            raise TaskMismatchError(
                f"{d} and {base_dir} describe different tasks or events"
            )
    lines = ["run\talgorithm\tseed\tobjective\tacc_greedy"]
    for d, data, records in loaded:
        for seed in sorted(records):
            final = records[seed][-1]
            lines.append(
                f"{d.name}\t{data['algorithm']}\t{seed}"
                f"\t{final.objective:.6g}\t{final.acc_greedy:.4g}"
            )
    base_records = loaded[0][2]
    for d, data, records in loaded[1:]:
        shared = sorted(set(records) & set(base_records))
        wins = sum(
            1 for s in shared
            if records[s][-1].acc_greedy > base_records[s][-1].acc_greedy
        )
        ties = sum(
            1 for s in shared
            if records[s][-1].acc_greedy == base_records[s][-1].acc_greedy
        )
        lines.append(
            f"{d.name} vs {base_dir.name}: wins={wins} ties={ties} "
            f"losses={len(shared) - wins - ties} "
            f"(final greedy accuracy over {len(shared)} shared seeds)"
        )
    return "\n".join(lines) + "\n"


def write_report(run_dir: str | Path) -> list[Path]:
    """Pivot per-seed records into one series file per metric.

    Output is a function of the records alone, so rewriting a report is
    idempotent.  The timing column is omitted: record rows intentionally
    zero it out, and real timing already lives in ``summary.txt``.
    """
    d = Path(run_dir)
    _, records = _load_run(d)
    seeds = sorted(records)
    lengths = {len(rows) for rows in records.values()}
    if len(lengths) != 1:
        raise ConfigError(f"seed records disagree on length: {sorted(lengths)}")
    n_rows = lengths.pop()
    written: list[Path] = []
    for metric in TSV_COLUMNS[1:-1]:
        lines = ["\t".join(["t"] + [f"seed{s}" for s in seeds] + ["mean"])]
        for t in range(n_rows):
            vals = [float(getattr(records[s][t], metric)) for s in seeds]
            cells = [str(t)] + [repr(v) for v in vals]
            cells.append(repr(float(np.mean(vals))))
            lines.append("\t".join(cells))
        path = d / f"series.{metric}.tsv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def resolve_out_dir(cfg: RunConfig, explicit: str | None, config_name: str) -> Path:
    """Output directory precedence: flag, config `out`, env root, ./runs."""
    if explicit:
        return Path(explicit)
    if cfg.data["out"]:
        return Path(cfg.data["out"])
    return Path(os.environ.get("LATENTLAB_OUT", "runs")) / config_name
