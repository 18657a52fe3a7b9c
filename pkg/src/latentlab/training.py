"""Training loops: event-conditioned EM and the baseline family around it.

The centerpiece alternates an E-step (any engine from `esteps`) with an
M-step (closed form on tabular features, otherwise line-searched ascent on
the weighted-likelihood surrogate).  The baselines reuse the same M-step
machinery so the unification identities can be tested literally: filtered
fine-tuning and expectation-weighted self-training are the same update with
weights obtained a different way, and the preference loop trains against
pairwise logits of the same joint model.

Every loop emits `RunRecord` rows with one fixed metric schema, so runs of
different algorithms can be tabulated against each other byte for byte.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ConfigError,
    SurrogateDecreaseError,
    TaskMismatchError,
    UnseenTagError,
    ZeroProbabilityPairError,
)
from .esteps import (
    EStepSpec,
    PolicyGradConfig,
    estep_policy_gradient,
    run_estep,
    tv_to_exact,
)
from .graph import JointModel
from .logspace import LOG_CLAMP
from .models import LogitModel, kl_between
from .rng import stream
from .tasks import (
    BAD_TAG,
    GOOD_TAG,
    EventSpec,
    GenerativeTask,
    success_event,
)

Pair = tuple[int, int]
Weighted = tuple[list[Pair], np.ndarray]


# -- M-step ------------------------------------------------------------------


@dataclass
class MStepSpec:
    """How to turn per-prompt weights over (z, y) pairs into new parameters.

    ``closed_form`` writes log-weights straight into tabular logits;
    ``gradient_ascent`` line-searches the weighted-likelihood surrogate and
    works for any feature map; ``weighted_mle_from_samples`` picks whichever
    of the two the feature map supports.
    """

    kind: str = "closed_form"
    steps: int = 50
    rate: float = 0.5

    def __post_init__(self):
        kinds = ("closed_form", "gradient_ascent", "weighted_mle_from_samples")
        if self.kind not in kinds:
            raise ConfigError(f"mstep kind {self.kind!r} not in {kinds}")
        if self.steps < 1:
            raise ConfigError(f"mstep steps must be >= 1, got {self.steps}")
        if self.rate <= 0:
            raise ConfigError(f"mstep rate must be positive, got {self.rate}")


def _weight_vector(task: GenerativeTask, weighted: Weighted) -> np.ndarray:
    support, probs = weighted
    q = np.zeros(task.n_joint)
    for (zi, yi), p in zip(support, probs):
        q[task.zy_index(zi, yi)] += p
    return q


def mstep(
    model: LogitModel,
    posteriors: dict[int, Weighted],
    spec: MStepSpec,
    rho: np.ndarray | None = None,
) -> LogitModel:
    """Maximize the weighted log likelihood of per-prompt (z, y) weights.

    Prompts absent from `posteriors` keep their current parameters (tabular)
    or simply contribute no term (shared features).
    """
    if not posteriors:
        return model
    task = model.task
    rho = np.asarray(task.rho if rho is None else rho, dtype=np.float64)
    kind = spec.kind
    if kind == "weighted_mle_from_samples":
        kind = "closed_form" if model.features.supports_closed_form else "gradient_ascent"

    if kind == "closed_form":
        if not model.features.supports_closed_form:
            raise ConfigError(
                "closed_form update needs per-prompt tabular features"
            )
        theta = model.theta.copy()
        for x_idx, weighted in posteriors.items():
            q = _weight_vector(task, weighted)
            logits = np.full(task.n_joint, LOG_CLAMP)
            pos = q > 0.0
            logits[pos] = np.log(q[pos])
            off = model.features.offset(x_idx)
            theta[off : off + task.n_joint] = logits
        return model.with_theta(theta)

    q_vecs = {x: _weight_vector(task, w) for x, w in posteriors.items()}

    def surrogate(theta: np.ndarray) -> float:
        total = 0.0
        for x_idx, q in q_vecs.items():
            logits = model.features.logits(x_idx, theta)
            total += rho[x_idx] * (float(np.dot(q, logits)) - float(logsumexp(logits)))
        return total

    def gradient(theta: np.ndarray) -> np.ndarray:
        g = np.zeros(model.features.dim)
        for x_idx, q in q_vecs.items():
            logits = model.features.logits(x_idx, theta)
            with np.errstate(under="ignore"):
                p = np.exp(logits - logsumexp(logits))
            g += rho[x_idx] * model.features.adjoint(x_idx, q - p)
        return g

    theta = model.theta.copy()
    start = value = surrogate(theta)
    # persistent growing rate: badly scaled problems (rho-weighted blocks,
    # tiny target masses) need steps far above any sensible fixed rate, and
    # the strict backtracking below keeps growth safe
    rate = spec.rate
    for _ in range(spec.steps):
        g = gradient(theta)
        if float(np.linalg.norm(g)) == 0.0:
            break
        trial = rate
        accepted = False
        for _ in range(40):
            candidate = theta + trial * g
            new_value = surrogate(candidate)
            if new_value >= value:
                theta, value, accepted = candidate, new_value, True
                rate = trial * 1.5
                break
            trial *= 0.5
        if not accepted:
            break
    if value < start - 1e-12:
        raise SurrogateDecreaseError(
            f"surrogate fell from {start:.12g} to {value:.12g}"
        )
    return model.with_theta(theta)


# -- one EM iteration ----------------------------------------------------------


@dataclass
class IterationReport:
    """What one E+M pass did: objectives around it, movement, engine notes."""

    iteration: int
    objective_before: float
    objective_after: float
    kl_step: float
    tv_mean: float
    skipped: tuple[int, ...] = ()
    flags: tuple[str, ...] = ()


def _averaged_kl(new: LogitModel, old: LogitModel, rho: np.ndarray) -> float:
    return float(
        sum(rho[x] * kl_between(new, old, x) for x in range(len(rho)))
    )


def em_iterate(
    model: LogitModel,
    task: GenerativeTask,
    event: EventSpec,
    estep_spec: EStepSpec,
    mstep_spec: MStepSpec,
    *,
    seed: int,
    iteration: int,
) -> tuple[LogitModel, IterationReport]:
    """One E-step across prompts followed by one M-step.

    Prompts whose engine returns empty-handed are skipped for this round;
    if every prompt is skipped the model comes back unchanged with the
    ``all_prompts_skipped`` flag.
    """
    jm = JointModel(model)
    posteriors: dict[int, Weighted] = {}
    tvs: list[float] = []
    flags: set[str] = set()
    skipped: list[int] = []
    for x_idx in range(task.n_prompts):
        rng = stream(seed, "estep", estep_spec.backend, x_idx, iteration)
        result = run_estep(jm, x_idx, event, estep_spec, rng)
        flags.update(result.flags)
        if result.empty:
            skipped.append(x_idx)
            continue
        posteriors[x_idx] = (result.support, result.probs)
        if result.tv_error is not None:
            tvs.append(result.tv_error)

    objective_before = jm.averaged_event_logprob(event)
    tv_mean = float(np.mean(tvs)) if tvs else math.nan
    if not posteriors:
        report = IterationReport(
            iteration=iteration,
            objective_before=objective_before,
            objective_after=objective_before,
            kl_step=0.0,
            tv_mean=tv_mean,
            skipped=tuple(skipped),
            flags=tuple(sorted(flags | {"all_prompts_skipped"})),
        )
        return model, report

    new_model = mstep(model, posteriors, mstep_spec, rho=task.rho)
    report = IterationReport(
        iteration=iteration,
        objective_before=objective_before,
        objective_after=JointModel(new_model).averaged_event_logprob(event),
        kl_step=_averaged_kl(new_model, model, task.rho),
        tv_mean=tv_mean,
        skipped=tuple(skipped),
        flags=tuple(sorted(flags)),
    )
    return new_model, report


# -- metric rows ----------------------------------------------------------------

TSV_COLUMNS = (
    "t",
    "objective",
    "kl_step",
    "kl_to_ref",
    "tv_estep",
    "acc_greedy",
    "acc_sampled",
    "wall_ms",
)


@dataclass
class RunRow:
    t: int
    objective: float
    kl_step: float
    kl_to_ref: float
    tv_estep: float
    acc_greedy: float
    acc_sampled: float
    wall_ms: float


@dataclass
class RunRecord:
    """All rows of one run plus its provenance and any certificates."""

    algorithm: str
    seed: int
    rows: list[RunRow] = field(default_factory=list)
    flags: tuple[str, ...] = ()
    certificates: dict = field(default_factory=dict)

    def final(self) -> RunRow:
        return self.rows[-1]

    def to_tsv(self) -> str:
        # wall_ms is written as 0 so reruns of the same seed produce
        # byte-identical tables; measured timing lives in run summaries.
        lines = ["\t".join(TSV_COLUMNS)]
        for row in self.rows:
            cells = [str(row.t)]
            for name in TSV_COLUMNS[1:-1]:
                cells.append(repr(float(getattr(row, name))))
            cells.append("0")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def record_from_tsv(text: str) -> list[RunRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != TSV_COLUMNS:
        raise ConfigError("metric table header does not match the fixed schema")
    rows = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        rows.append(
            RunRow(
                t=int(cells[0]),
                **{
                    name: float(cells[i + 1])
                    for i, name in enumerate(TSV_COLUMNS[1:])
                },
            )
        )
    return rows


def greedy_accuracy(model: LogitModel, task: GenerativeTask) -> float:
    """Fraction of prompts whose greedy decode emits the reference response."""
    if task.truth is None:
        return math.nan
    hits = sum(
        1
        for x in range(task.n_prompts)
        if model.greedy_joint(x)[1] == task.truth[x][1]
    )
    return hits / task.n_prompts


def sampled_accuracy(
    model: LogitModel, task: GenerativeTask, *, seed: int, iteration: int
) -> float:
    """Single-draw response accuracy, one seeded sample per prompt."""
    if task.truth is None:
        return math.nan
    hits = 0
    for x in range(task.n_prompts):
        rng = stream(seed, "acc-sample", x, iteration)
        if model.sample_joint(x, rng)[1] == task.truth[x][1]:
            hits += 1
    return hits / task.n_prompts


AccFn = Callable[[LogitModel, GenerativeTask, int, int], tuple[float, float]]


def _default_acc(
    model: LogitModel, task: GenerativeTask, seed: int, iteration: int
) -> tuple[float, float]:
    """Both accuracy columns from one conditional table per prompt."""
    if task.truth is None:
        return math.nan, math.nan
    greedy_hits = 0
    sampled_hits = 0
    for x in range(task.n_prompts):
        view = model.conditional_tables(x)
        target = task.truth[x][1]
        if view.greedy()[1] == target:
            greedy_hits += 1
        rng = stream(seed, "acc-sample", x, iteration)
        if view.sample(rng)[1] == target:
            sampled_hits += 1
    return greedy_hits / task.n_prompts, sampled_hits / task.n_prompts


def _make_row(
    t: int,
    model: LogitModel,
    prev: LogitModel | None,
    task: GenerativeTask,
    event: EventSpec,
    *,
    seed: int,
    reference: LogitModel | None,
    tv: float,
    wall_ms: float,
    acc_fn: AccFn,
) -> RunRow:
    acc_g, acc_s = acc_fn(model, task, seed, t)
    return RunRow(
        t=t,
        objective=JointModel(model).averaged_event_logprob(event),
        kl_step=_averaged_kl(model, prev, task.rho) if prev is not None else math.nan,
        kl_to_ref=(
            _averaged_kl(model, reference, task.rho)
            if reference is not None
            else math.nan
        ),
        tv_estep=tv,
        acc_greedy=acc_g,
        acc_sampled=acc_s,
        wall_ms=wall_ms,
    )


StepFn = Callable[[LogitModel, int], tuple[LogitModel, float, tuple[str, ...]]]


def _run_loop(
    algorithm: str,
    model: LogitModel,
    task: GenerativeTask,
    event: EventSpec,
    step_fn: StepFn,
    *,
    iterations: int,
    seed: int,
    reference: LogitModel | None = None,
    on_iteration=None,
    acc_fn: AccFn = _default_acc,
) -> tuple[LogitModel, RunRecord]:
    """Drive any per-iteration update into the fixed metric schema.

    Row 0 describes the initial model; row t describes the model after t
    updates.  `step_fn(model, t)` returns the updated model, a mean E-step
    total variation (nan when meaningless), and any flags.
    """
    record = RunRecord(algorithm=algorithm, seed=seed)
    flags: set[str] = set()
    row = _make_row(
        0, model, None, task, event,
        seed=seed, reference=reference, tv=math.nan, wall_ms=0.0, acc_fn=acc_fn,
    )
    record.rows.append(row)
    if on_iteration is not None:
        on_iteration(0, model, row)
    for t in range(1, iterations + 1):
        started = time.perf_counter()
        new_model, tv, step_flags = step_fn(model, t)
        flags.update(step_flags)
        wall_ms = (time.perf_counter() - started) * 1000.0
        row = _make_row(
            t, new_model, model, task, event,
            seed=seed, reference=reference, tv=tv, wall_ms=wall_ms, acc_fn=acc_fn,
        )
        record.rows.append(row)
        if on_iteration is not None:
            on_iteration(t, new_model, row)
        model = new_model
    record.flags = tuple(sorted(flags))
    return model, record


# -- the EM loop -----------------------------------------------------------------


def run_em(
    model: LogitModel,
    task: GenerativeTask,
    event: EventSpec,
    estep_spec: EStepSpec,
    mstep_spec: MStepSpec,
    *,
    iterations: int,
    seed: int,
    reference: LogitModel | None = None,
    on_iteration=None,
) -> tuple[LogitModel, RunRecord]:
    """Alternate E and M steps, recording metrics and step certificates.

    Two certificates are attached.  The telescoping one says the smallest
    per-step divergence cannot exceed the averaged objective gain per
    iteration; it is asserted only for exact E-steps with closed-form
    M-steps, where each update is an exact coordinate maximizer, and is
    reported informationally otherwise.  The second compares the best
    objective gap against a divergence-to-reference budget; it is asserted
    only when a first-order concavity probe along the reference direction
    passes at every iterate, because the underlying argument needs concavity
    that arbitrary feature maps do not provide.
    """
    models = [model]

    def step(current: LogitModel, t: int):
        new_model, report = em_iterate(
            current, task, event, estep_spec, mstep_spec, seed=seed, iteration=t
        )
        models.append(new_model)
        return new_model, report.tv_mean, report.flags

    final, record = _run_loop(
        "em", model, task, event, step,
        iterations=iterations, seed=seed, reference=reference,
        on_iteration=on_iteration,
    )

    if iterations > 0:
        gain = record.rows[-1].objective - record.rows[0].objective
        kl_steps = [row.kl_step for row in record.rows[1:]]
        lhs = min(kl_steps)
        rhs = gain / iterations
        exact_route = (
            estep_spec.backend == "exact" and mstep_spec.kind == "closed_form"
        )
        record.certificates["telescoping"] = {
            "min_kl_step": lhs,
            "mean_gain": rhs,
            "asserted": exact_route,
            "holds": bool(lhs <= rhs + 1e-9),
        }
        if exact_route and not lhs <= rhs + 1e-9:
            raise AssertionError(
                f"telescoping certificate failed: min kl {lhs:.12g} "
                f"> mean gain {rhs:.12g}"
            )

    if reference is not None and iterations > 0:
        ref_objective = JointModel(reference).averaged_event_logprob(event)
        probe_ok = True
        for m in models[:-1]:
            jm = JointModel(m)
            slope = float(
                np.dot(jm.averaged_grad(event), reference.theta - m.theta)
            )
            gap = ref_objective - jm.averaged_event_logprob(event)
            if slope < gap - 1e-9:
                probe_ok = False
                break
        best_gap = min(
            ref_objective - row.objective for row in record.rows[:-1]
        )
        budget = _averaged_kl(models[0], reference, task.rho) / iterations
        record.certificates["reference_gap"] = {
            "best_gap": best_gap,
            "kl_budget": budget,
            "concavity_probe": probe_ok,
            "asserted": probe_ok,
            "holds": bool(best_gap <= budget + 1e-6),
        }
        if probe_ok and not best_gap <= budget + 1e-6:
            raise AssertionError(
                f"reference-gap certificate failed under a passing concavity "
                f"probe: gap {best_gap:.12g} > budget {budget:.12g}"
            )

    return final, record


def reference_optimum(
    model: LogitModel,
    task: GenerativeTask,
    event: EventSpec,
    *,
    steps: int = 10000,
    rate: float = 1.0,
) -> LogitModel:
    """Line-searched ascent on the averaged event log probability.

    Used to manufacture a strong reference point; with tabular features and
    a concave instance this is the maximizer to numerical precision.
    """
    current = model

    def objective(m: LogitModel) -> float:
        return JointModel(m).averaged_event_logprob(event)

    value = objective(current)
    for _ in range(steps):
        grad = JointModel(current).averaged_grad(event)
        if float(np.linalg.norm(grad)) < 1e-12:
            break
        step = rate
        accepted = False
        for _ in range(40):
            candidate = current.with_theta(current.theta + step * grad)
            new_value = objective(candidate)
            if new_value > value:
                current, value, accepted = candidate, new_value, True
                break
            step *= 0.5
        if not accepted:
            break
    return current


# -- filtered fine-tuning ---------------------------------------------------------


def _verified(task: GenerativeTask, x_idx: int, zi: int, yi: int) -> bool:
    return task.evaluator(x_idx, zi, yi, 1) == 1.0


def _weights_tv(
    model: LogitModel,
    task: GenerativeTask,
    event: EventSpec,
    report: dict,
) -> float:
    """Mean distance of an update's implied weights from the true posterior.

    Prompts that produced no usable weights count as maximal error: the
    update did nothing there, which is as far from the posterior as an
    approximation can be.
    """
    jm = JointModel(model)
    tvs = [
        tv_to_exact(jm, x_idx, event, support, probs)
        for x_idx, (support, probs) in report["weights"].items()
    ]
    tvs.extend(1.0 for _ in report["skipped"])
    return float(np.mean(tvs)) if tvs else math.nan


def filter_sft_update(
    model: LogitModel,
    task: GenerativeTask,
    budget: int,
    *,
    seed: int,
    iteration: int,
    exact_weights: bool = False,
    mstep_spec: MStepSpec | None = None,
) -> tuple[LogitModel, dict]:
    """Sample, keep verified draws, fit the kept set by weighted MLE.

    With ``exact_weights`` the empirical filter is replaced by its exact
    expectation: every verified pair weighted by its model probability.
    That limit is one EM iteration in disguise, which the verification
    suite checks parameter by parameter.
    """
    if task.evaluator_kind != "binary":
        raise TaskMismatchError(
            "filtered fine-tuning needs a binary pass/fail evaluator"
        )
    mstep_spec = mstep_spec or MStepSpec(kind="weighted_mle_from_samples")
    posteriors: dict[int, Weighted] = {}
    acceptance: dict[int, float] = {}
    skipped: list[int] = []
    for x_idx in range(task.n_prompts):
        if exact_weights:
            p = model.joint_probs(x_idx)
            support = [
                (zi, yi)
                for zi in range(task.n_latents)
                for yi in range(task.n_responses)
                if _verified(task, x_idx, zi, yi)
            ]
            weights = np.array(
                [p[task.zy_index(zi, yi)] for zi, yi in support]
            )
            total = float(weights.sum())
            acceptance[x_idx] = total
        else:
            rng = stream(seed, "filter", x_idx, iteration)
            view = model.conditional_tables(x_idx)
            counts: dict[Pair, int] = {}
            kept = 0
            for _ in range(budget):
                pair = view.sample(rng)
                if _verified(task, x_idx, *pair):
                    counts[pair] = counts.get(pair, 0) + 1
                    kept += 1
            support = sorted(counts)
            weights = np.array([counts[pair] for pair in support], dtype=np.float64)
            total = float(weights.sum())
            acceptance[x_idx] = kept / budget
        if total <= 0.0:
            skipped.append(x_idx)
            continue
        posteriors[x_idx] = (support, weights / total)
    new_model = mstep(model, posteriors, mstep_spec, rho=task.rho)
    report = {
        "mode": "exact" if exact_weights else "sampled",
        "acceptance": acceptance,
        "skipped": tuple(skipped),
        "weights": posteriors,
    }
    return new_model, report


def run_filter_sft(
    model: LogitModel,
    task: GenerativeTask,
    *,
    iterations: int,
    budget: int,
    seed: int,
    exact_weights: bool = False,
    reference: LogitModel | None = None,
    on_iteration=None,
) -> tuple[LogitModel, RunRecord]:
    event = success_event()

    def step(current: LogitModel, t: int):
        new_model, report = filter_sft_update(
            current, task, budget,
            seed=seed, iteration=t, exact_weights=exact_weights,
        )
        flags = ("prompts_skipped",) if report["skipped"] else ()
        return new_model, _weights_tv(current, task, event, report), flags

    return _run_loop(
        "filter_sft", model, task, event, step,
        iterations=iterations, seed=seed, reference=reference,
        on_iteration=on_iteration,
    )


# -- expectation-weighted self-training --------------------------------------------


def restem_update(
    model: LogitModel,
    task: GenerativeTask,
    budget: int,
    *,
    seed: int,
    iteration: int,
    exact_expectation: bool = False,
    mstep_spec: MStepSpec | None = None,
) -> tuple[LogitModel, dict]:
    """Weight draws by the soft evaluator's success probability, then fit.

    With ``exact_expectation`` every pair is weighted by model probability
    times success probability, which again collapses to one EM iteration on
    the success event.  A prompt whose weights concentrate on one pair
    beyond 0.999 is flagged degenerate: the update has become a hard filter.
    """
    if task.evaluator_kind != "soft":
        raise TaskMismatchError(
            "expectation-weighted self-training needs a soft evaluator"
        )
    mstep_spec = mstep_spec or MStepSpec(kind="weighted_mle_from_samples")
    posteriors: dict[int, Weighted] = {}
    degenerate: list[int] = []
    skipped: list[int] = []
    for x_idx in range(task.n_prompts):
        if exact_expectation:
            p = model.joint_probs(x_idx)
            support = [
                (zi, yi)
                for zi in range(task.n_latents)
                for yi in range(task.n_responses)
            ]
            weights = np.array(
                [
                    p[task.zy_index(zi, yi)] * task.evaluator(x_idx, zi, yi, 1)
                    for zi, yi in support
                ]
            )
        else:
            rng = stream(seed, "restem", x_idx, iteration)
            view = model.conditional_tables(x_idx)
            sums: dict[Pair, float] = {}
            for _ in range(budget):
                pair = view.sample(rng)
                w = task.evaluator(x_idx, *pair, 1)
                if w > 0.0:
                    sums[pair] = sums.get(pair, 0.0) + w
            support = sorted(sums)
            weights = np.array([sums[pair] for pair in support])
        total = float(weights.sum())
        if total <= 0.0:
            skipped.append(x_idx)
            continue
        probs = weights / total
        if probs.size and float(probs.max()) > 0.999:
            degenerate.append(x_idx)
        posteriors[x_idx] = (support, probs)
    new_model = mstep(model, posteriors, mstep_spec, rho=task.rho)
    report = {
        "mode": "exact" if exact_expectation else "sampled",
        "degenerate": tuple(degenerate),
        "skipped": tuple(skipped),
        "weights": posteriors,
    }
    return new_model, report


def run_restem(
    model: LogitModel,
    task: GenerativeTask,
    *,
    iterations: int,
    budget: int,
    seed: int,
    exact_expectation: bool = False,
    reference: LogitModel | None = None,
    on_iteration=None,
) -> tuple[LogitModel, RunRecord]:
    event = success_event()

    def step(current: LogitModel, t: int):
        new_model, report = restem_update(
            current, task, budget,
            seed=seed, iteration=t, exact_expectation=exact_expectation,
        )
        flags = ()
        if report["degenerate"]:
            flags += ("degenerate_weights",)
        if report["skipped"]:
            flags += ("prompts_skipped",)
        return new_model, _weights_tv(current, task, event, report), flags

    return _run_loop(
        "restem", model, task, event, step,
        iterations=iterations, seed=seed, reference=reference,
        on_iteration=on_iteration,
    )


# -- tag-conditioned fine-tuning -----------------------------------------------------


def _require_tag_task(task: GenerativeTask) -> None:
    if task.n_latents != 2 or task.truth is None:
        raise TaskMismatchError(
            "tag-conditioned training needs a two-tag latent space "
            "and reference responses"
        )


def build_tagged_corpus(
    model: LogitModel,
    task: GenerativeTask,
    budget: int,
    *,
    seed: int,
    iteration: int,
) -> list[tuple[int, int, int]]:
    """Sample responses and relabel the latent slot with a quality tag.

    The sampled latent is discarded; what the model said does not decide
    the tag, the reference response does.
    """
    _require_tag_task(task)
    corpus: list[tuple[int, int, int]] = []
    for x_idx in range(task.n_prompts):
        rng = stream(seed, "tag-corpus", x_idx, iteration)
        view = model.conditional_tables(x_idx)
        for _ in range(budget):
            _, y_idx = view.sample(rng)
            tag = GOOD_TAG if y_idx == task.truth[x_idx][1] else BAD_TAG
            corpus.append((x_idx, tag, y_idx))
    return corpus


def conditional_sft_update(
    model: LogitModel,
    task: GenerativeTask,
    corpus: list[tuple[int, int, int]],
    mstep_spec: MStepSpec | None = None,
) -> LogitModel:
    """Weighted MLE on (tag, response) pairs from a tagged corpus."""
    _require_tag_task(task)
    mstep_spec = mstep_spec or MStepSpec(kind="weighted_mle_from_samples")
    counts: dict[int, dict[Pair, int]] = {}
    for x_idx, tag, y_idx in corpus:
        per = counts.setdefault(x_idx, {})
        per[(tag, y_idx)] = per.get((tag, y_idx), 0) + 1
    posteriors: dict[int, Weighted] = {}
    for x_idx, per in counts.items():
        support = sorted(per)
        weights = np.array([per[pair] for pair in support], dtype=np.float64)
        posteriors[x_idx] = (support, weights / weights.sum())
    return mstep(model, posteriors, mstep_spec, rho=task.rho)


def conditional_decode(
    model: LogitModel,
    task: GenerativeTask,
    x_idx: int,
    tag: int,
    rng: np.random.Generator | None = None,
) -> int:
    """Response under the model conditioned on emitting `tag` first.

    Greedy (argmax, lowest index on ties) without an rng, categorical with
    one.  Raises `UnseenTagError` when the tag has zero conditional mass.
    """
    p = model.joint_probs(x_idx)
    row = np.array(
        [p[task.zy_index(tag, yi)] for yi in range(task.n_responses)]
    )
    total = row.sum()
    if total <= 0.0:
        raise UnseenTagError(f"tag {tag} carries no mass at prompt {x_idx}")
    if rng is None:
        return int(np.argmax(row))
    return int(rng.choice(task.n_responses, p=row / total))


def run_cond_sft(
    model: LogitModel,
    task: GenerativeTask,
    *,
    iterations: int,
    budget: int,
    seed: int,
    reference: LogitModel | None = None,
    on_iteration=None,
) -> tuple[LogitModel, RunRecord]:
    """Tagged-corpus training, evaluated in its deployment mode.

    Accuracy columns condition generation on the good tag, because that is
    how a tag-trained model is meant to be used.
    """
    _require_tag_task(task)
    event = success_event()

    def tag_acc(m: LogitModel, tk: GenerativeTask, s: int, t: int) -> tuple[float, float]:
        greedy_hits = 0
        sampled_hits = 0
        for x in range(tk.n_prompts):
            target = tk.truth[x][1]
            try:
                if conditional_decode(m, tk, x, GOOD_TAG) == target:
                    greedy_hits += 1
                rng = stream(s, "acc-sample", x, t)
                if conditional_decode(m, tk, x, GOOD_TAG, rng) == target:
                    sampled_hits += 1
            except UnseenTagError:
                continue
        return greedy_hits / tk.n_prompts, sampled_hits / tk.n_prompts

    def step(current: LogitModel, t: int):
        corpus = build_tagged_corpus(current, task, budget, seed=seed, iteration=t)
        return conditional_sft_update(current, task, corpus), math.nan, ()

    return _run_loop(
        "cond_sft", model, task, event, step,
        iterations=iterations, seed=seed, reference=reference,
        on_iteration=on_iteration, acc_fn=tag_acc,
    )


# -- pairwise preference training ------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    x_idx: int
    pos: Pair
    neg: Pair


def latent_dpo_loss_and_grad(
    policy: LogitModel,
    reference: LogitModel,
    pairs: list[PreferencePair],
    beta: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Pairwise logistic loss on full (z, y) completions and its gradient.

    The margin of a pair is beta times the policy-vs-reference log-ratio
    advantage of the preferred completion over the rejected one; the loss
    is the mean softplus of the negated margin.  Within one prompt the
    partition terms cancel, so the loss is invariant to per-prompt logit
    shifts.  Pairs whose completions sit on clamped (effectively zero
    probability) parameters are rejected loudly rather than silently
    saturating.
    """
    if not pairs:
        raise ConfigError("preference loss needs at least one pair")
    task = policy.task
    by_prompt: dict[int, list[PreferencePair]] = {}
    for pair in pairs:
        by_prompt.setdefault(pair.x_idx, []).append(pair)

    losses: list[float] = []
    grad = np.zeros(policy.features.dim)
    n = float(len(pairs))
    for x_idx, group in by_prompt.items():
        lp_pol = policy.joint_log_probs(x_idx)
        lp_ref = reference.joint_log_probs(x_idx)
        weight = np.zeros(task.n_joint)
        for pref in group:
            ip = task.zy_index(*pref.pos)
            ineg = task.zy_index(*pref.neg)
            involved = (lp_pol[ip], lp_pol[ineg], lp_ref[ip], lp_ref[ineg])
            if min(involved) <= LOG_CLAMP / 2:
                raise ZeroProbabilityPairError(
                    f"pair at prompt {x_idx} touches a clamped completion"
                )
            margin = beta * (
                (lp_pol[ip] - lp_ref[ip]) - (lp_pol[ineg] - lp_ref[ineg])
            )
            losses.append(float(np.logaddexp(0.0, -margin)))
            # d loss / d margin = -sigmoid(-margin)
            coef = float(np.exp(-np.logaddexp(0.0, margin))) * beta / n
            weight[ip] -= coef
            weight[ineg] += coef
        grad += policy.features.adjoint(x_idx, weight)
    return float(np.mean(losses)), grad


def dpo_fit(
    reference: LogitModel,
    pairs: list[PreferencePair],
    *,
    steps: int = 100,
    rate: float = 0.5,
    beta: float = 1.0,
    init: LogitModel | None = None,
) -> tuple[LogitModel, list[float]]:
    """Line-searched descent on the pairwise loss, starting at the reference."""
    policy = init if init is not None else reference.with_theta(reference.theta)
    value, grad = latent_dpo_loss_and_grad(policy, reference, pairs, beta)
    history = [value]
    for _ in range(steps):
        if float(np.linalg.norm(grad)) == 0.0:
            break
        step = rate
        accepted = False
        for _ in range(40):
            candidate = policy.with_theta(policy.theta - step * grad)
            new_value, new_grad = latent_dpo_loss_and_grad(
                candidate, reference, pairs, beta
            )
            if new_value < value:
                policy, value, grad = candidate, new_value, new_grad
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        history.append(value)
    return policy, history


def _pick_pair(
    task: GenerativeTask,
    x_idx: int,
    candidates: list[Pair],
    lp: np.ndarray,
) -> PreferencePair | None:
    """Best verified versus worst unverified candidate, or None if one-sided.

    Ties break deterministically: highest (then lexicographically smallest)
    for the preferred side, lowest (then smallest) for the rejected side.
    """
    verified = [c for c in candidates if _verified(task, x_idx, *c)]
    unverified = [c for c in candidates if not _verified(task, x_idx, *c)]
    if not verified or not unverified:
        return None
    best = min(verified, key=lambda c: (-lp[task.zy_index(*c)], c))
    worst = min(unverified, key=lambda c: (lp[task.zy_index(*c)], c))
    return PreferencePair(x_idx=x_idx, pos=best, neg=worst)


def run_pref_loop(
    model: LogitModel,
    task: GenerativeTask,
    *,
    iterations: int,
    candidates: int,
    seed: int,
    sampler: str = "model",
    dpo_steps: int = 100,
    dpo_rate: float = 0.5,
    dpo_beta: float = 1.0,
    pg_params: dict | None = None,
    reference: LogitModel | None = None,
    on_iteration=None,
) -> tuple[LogitModel, RunRecord]:
    """Iterated preference training over verified/unverified candidate pairs.

    ``sampler`` picks where candidates come from: ``model`` draws from the
    current model itself; ``posterior`` first trains an inference sampler
    toward the success-event posterior and draws from that, which is what
    puts verified completions on the table when the model alone would
    almost never produce one.  Each round fits a fresh policy against the
    current model as reference, then adopts it.
    """
    if task.evaluator_kind != "binary":
        raise TaskMismatchError("preference pairs need a binary evaluator")
    if sampler not in ("model", "posterior"):
        raise ConfigError(f"sampler must be 'model' or 'posterior', got {sampler!r}")
    event = success_event()
    pg_cfg = PolicyGradConfig(**(pg_params or {"iterations": 60}))

    def step(current: LogitModel, t: int):
        jm = JointModel(current)
        pairs: list[PreferencePair] = []
        for x_idx in range(task.n_prompts):
            rng = stream(seed, "pref", sampler, x_idx, t)
            if sampler == "model":
                view = current.conditional_tables(x_idx)
                drawn = [view.sample(rng) for _ in range(candidates)]
            else:
                result = estep_policy_gradient(
                    jm, x_idx, event, cfg=pg_cfg, compare_exact=False
                )
                picks = rng.choice(
                    task.n_joint, size=candidates, p=result.probs
                )
                drawn = [task.zy_unindex(int(k)) for k in picks]
            pair = _pick_pair(task, x_idx, drawn, current.joint_log_probs(x_idx))
            if pair is not None:
                pairs.append(pair)
        if not pairs:
            return current, math.nan, ("no_pairs",)
        policy, _ = dpo_fit(
            current, pairs, steps=dpo_steps, rate=dpo_rate, beta=dpo_beta
        )
        return policy, math.nan, ()

    algorithm = "posterior_dpo" if sampler == "posterior" else "iter_dpo"
    return _run_loop(
        algorithm, model, task, event, step,
        iterations=iterations, seed=seed, reference=reference,
        on_iteration=on_iteration,
    )
