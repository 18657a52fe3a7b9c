"""Finite generative tasks with enumerable rationale and response spaces.

A task bundles prompts, a latent (rationale) space, a response space, a
binary observation space, and an evaluator giving P(o | x, z, y).  Spaces
are small enough to enumerate exactly, which is what makes every
downstream quantity (partition functions, posteriors, KL divergences)
checkable against brute force.

Token conventions: every latent and response is a token sequence that ends
with the task's eos token and contains no earlier eos, so the concatenation
rationale + response is prefix-free and can be treated as a single
autoregressive trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Collection, Sequence

import numpy as np

from .errors import (
    CapExceededError,
    EmptyEventError,
    OutOfSpaceError,
    RecordFormatError,
)
from .rng import stream

ENUMERATION_CAP = 10**6

Evaluator = Callable[[int, int, int, int], float]


@dataclass(frozen=True, order=True)
class TokenSequence:
    """Immutable token id tuple ending with the task's eos token."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    """Token id range [0, size) with a designated eos id."""

    size: int
    eos: int

    def __post_init__(self):
        if not 0 <= self.eos < self.size:
            raise ValueError(f"eos id {self.eos} outside vocabulary of size {self.size}")


def _check_sequence(seq: TokenSequence, vocab: Vocabulary, horizon: int) -> None:
    ids = seq.ids
    if len(ids) == 0 or len(ids) > horizon:
        raise ValueError(f"sequence length {len(ids)} outside [1, {horizon}]")
    if ids[-1] != vocab.eos:
        raise ValueError(f"sequence {ids} does not end with eos")
    if vocab.eos in ids[:-1]:
        raise ValueError(f"sequence {ids} contains eos before its final position")
    if any(not 0 <= t < vocab.size for t in ids):
        raise ValueError(f"sequence {ids} contains out-of-vocabulary tokens")


@dataclass(eq=False)
class GenerativeTask:
    """Finite prompt/latent/response/observation spaces plus an evaluator.

    `evaluator(x_idx, z_idx, y_idx, o)` returns P(o | x, z, y) for each
    observation value o in `obs_values`; for every (x, z, y) these must sum
    to 1.  `horizon` bounds the length of the concatenated latent+response
    trajectory.  Instances are treated as immutable after construction.
    """

    name: str
    vocab: Vocabulary
    prompts: tuple[str, ...]
    rho: np.ndarray
    latents: tuple[TokenSequence, ...]
    responses: tuple[TokenSequence, ...]
    obs_values: tuple[int, ...]
    evaluator: Evaluator
    evaluator_kind: str
    horizon: int
    seed: int = 0
    params: dict | None = None
    truth: dict[int, tuple[int, int]] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.rho.shape != (len(self.prompts),):
            raise ValueError("rho must have one weight per prompt")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must be a probability distribution over prompts")
        if len(set(self.latents)) != len(self.latents):
            raise ValueError("duplicate latent sequences")
        if len(set(self.responses)) != len(self.responses):
            raise ValueError("duplicate response sequences")
        joint_horizon = max(
            (len(z) + len(y) for z in self.latents for y in self.responses),
            default=0,
        )
        if joint_horizon > self.horizon:
            raise ValueError(
                f"joint sequences reach length {joint_horizon} > horizon {self.horizon}"
            )
        for seq in self.latents + self.responses:
            _check_sequence(seq, self.vocab, self.horizon)

    # -- index bookkeeping ------------------------------------------------

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def n_latents(self) -> int:
        return len(self.latents)

    @property
    def n_responses(self) -> int:
        return len(self.responses)

    @property
    def n_joint(self) -> int:
        return self.n_latents * self.n_responses

    def zy_index(self, z_idx: int, y_idx: int) -> int:
        return z_idx * self.n_responses + y_idx

    def zy_unindex(self, k: int) -> tuple[int, int]:
        return divmod(k, self.n_responses)

    def check_indices(self, x_idx: int, z_idx: int, y_idx: int) -> None:
        if not 0 <= x_idx < self.n_prompts:
            raise OutOfSpaceError(f"prompt index {x_idx} outside [0, {self.n_prompts})")
        if not 0 <= z_idx < self.n_latents:
            raise OutOfSpaceError(f"latent index {z_idx} outside [0, {self.n_latents})")
        if not 0 <= y_idx < self.n_responses:
            raise OutOfSpaceError(
                f"response index {y_idx} outside [0, {self.n_responses})"
            )

    def joint_tokens(self, z_idx: int, y_idx: int) -> tuple[int, ...]:
        """Concatenated latent+response trajectory for one joint outcome."""
        return self.latents[z_idx].ids + self.responses[y_idx].ids

    @cached_property
    def joint_sequences(self) -> tuple[tuple[int, ...], ...]:
        """All joint trajectories in (z_idx, y_idx) lexicographic order."""
        return tuple(
            z.ids + y.ids for z in self.latents for y in self.responses
        )

    @cached_property
    def tokens_to_zy(self) -> dict[tuple[int, ...], tuple[int, int]]:
        out: dict[tuple[int, ...], tuple[int, int]] = {}
        for zi in range(self.n_latents):
            for yi in range(self.n_responses):
                out[self.joint_tokens(zi, yi)] = (zi, yi)
        return out

    # -- evaluator --------------------------------------------------------

    def evaluator_prob(self, x_idx: int, z_idx: int, y_idx: int, o: int) -> float:
        self.check_indices(x_idx, z_idx, y_idx)
        if o not in self.obs_values:
            raise OutOfSpaceError(f"observation value {o} not in {self.obs_values}")
        return float(self.evaluator(x_idx, z_idx, y_idx, o))

    def success_prob(self, x_idx: int, z_idx: int, y_idx: int) -> float:
        """P(o = 1 | x, z, y); the task-level notion of a correct answer."""
        return float(self.evaluator(x_idx, z_idx, y_idx, 1))


def evaluator_normalization_gap(task: GenerativeTask) -> float:
    """Max |sum_o P(o|x,z,y) - 1| over all triples; 0 for a valid task."""
    worst = 0.0
    for x in range(task.n_prompts):
        for z in range(task.n_latents):
            for y in range(task.n_responses):
                total = sum(task.evaluator(x, z, y, o) for o in task.obs_values)
                worst = max(worst, abs(total - 1.0))
    return worst


# -- events ---------------------------------------------------------------

Subset = None | Collection[int] | Callable


@dataclass(frozen=True)
class EventSpec:
    """Restriction of the latent, response, and observation spaces.

    Each field is None (no restriction), a collection of indices into the
    corresponding space (observation values for `obs`), or a deterministic
    predicate over space elements (TokenSequence for latents/responses,
    int value for obs).
    """

    latents: Subset = None
    responses: Subset = None
    obs: Subset = None

    def describe(self) -> str:
        def one(s: Subset) -> str:
            if s is None:
                return "all"
            if callable(s):
                return "predicate"
            return f"set[{len(tuple(s))}]"

        return f"z={one(self.latents)} y={one(self.responses)} o={one(self.obs)}"


def full_event() -> EventSpec:
    return EventSpec()


def success_event() -> EventSpec:
    """No (z, y) restriction; observation pinned to o = 1."""
    return EventSpec(obs=(1,))


def _materialize_axis(subset: Subset, elements: Sequence, by_value: bool) -> tuple[int, ...]:
    n = len(elements)
    if subset is None:
        return tuple(range(n))
    if callable(subset):
        return tuple(i for i, el in enumerate(elements) if subset(el))
    picked = sorted(set(int(v) for v in subset))
    if by_value:
        value_to_idx = {v: i for i, v in enumerate(elements)}
        missing = [v for v in picked if v not in value_to_idx]
        if missing:
            raise OutOfSpaceError(f"observation values {missing} not in task")
        return tuple(sorted(value_to_idx[v] for v in picked))
    if picked and (picked[0] < 0 or picked[-1] >= n):
        raise OutOfSpaceError(f"event indices {picked} outside [0, {n})")
    return tuple(picked)


def materialize_event(
    task: GenerativeTask, event: EventSpec
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Index tuples (latent, response, obs) named by the event.

    Observation entries are indices into task.obs_values.  Raises
    EmptyEventError if any axis materializes empty.
    """
    z_idx = _materialize_axis(event.latents, task.latents, by_value=False)
    y_idx = _materialize_axis(event.responses, task.responses, by_value=False)
    o_idx = _materialize_axis(event.obs, task.obs_values, by_value=True)
    if not z_idx or not y_idx or not o_idx:
        raise EmptyEventError(f"event {event.describe()} is empty on task {task.name}")
    return z_idx, y_idx, o_idx


def enumerate_event(
    task: GenerativeTask, event: EventSpec
) -> list[tuple[int, int, int]]:
    """All (z_idx, y_idx, o_value) triples in the event.

    Order is lexicographic in (latent tokens, response tokens, o); factory
    tasks store their spaces token-sorted, so this coincides with index
    order.
    """
    z_idx, y_idx, o_idx = materialize_event(task, event)
    z_sorted = sorted(z_idx, key=lambda i: task.latents[i].ids)
    y_sorted = sorted(y_idx, key=lambda i: task.responses[i].ids)
    return [
        (zi, yi, task.obs_values[oi])
        for zi in z_sorted
        for yi in y_sorted
        for oi in o_idx
    ]


def event_zy_support(task: GenerativeTask, event: EventSpec) -> list[tuple[int, int]]:
    """Distinct (z_idx, y_idx) pairs of the event, in enumeration order."""
    z_idx, y_idx, _ = materialize_event(task, event)
    z_sorted = sorted(z_idx, key=lambda i: task.latents[i].ids)
    y_sorted = sorted(y_idx, key=lambda i: task.responses[i].ids)
    return [(zi, yi) for zi in z_sorted for yi in y_sorted]


def explicit_event(task: GenerativeTask, event: EventSpec) -> EventSpec:
    """Equivalent event with all axes materialized to explicit sets."""
    z_idx, y_idx, o_idx = materialize_event(task, event)
    return EventSpec(
        latents=z_idx,
        responses=y_idx,
        obs=tuple(task.obs_values[i] for i in o_idx),
    )


# -- evaluator constructors ------------------------------------------------


def _binary_evaluator(verify: Callable[[int, int, int], bool]) -> Evaluator:
    def evaluator(x: int, z: int, y: int, o: int) -> float:
        ok = 1.0 if verify(x, z, y) else 0.0
        return ok if o == 1 else 1.0 - ok

    return evaluator


def _soft_evaluator(
    verify: Callable[[int, int, int], bool], beta: float, wrong_penalty: float
) -> Evaluator:
    if wrong_penalty > 0:
        raise ValueError("wrong_penalty must be <= 0 so exp(R/beta) stays <= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")

    def evaluator(x: int, z: int, y: int, o: int) -> float:
        reward = 0.0 if verify(x, z, y) else wrong_penalty
        p_one = float(np.exp(reward / beta))
        return p_one if o == 1 else 1.0 - p_one

    return evaluator


def _make_evaluator(
    verify: Callable[[int, int, int], bool],
    kind: str,
    beta: float,
    wrong_penalty: float,
) -> tuple[Evaluator, str]:
    if kind == "binary":
        return _binary_evaluator(verify), "binary"
    if kind == "soft":
        return _soft_evaluator(verify, beta, wrong_penalty), "soft"
    raise ValueError(f"unknown evaluator kind {kind!r}")


def _subsample_prompts(n: int, limit: int | None, seed: int) -> list[int]:
    if limit is None or limit >= n:
        return list(range(n))
    if limit <= 0:
        raise ValueError("prompt_limit must be positive")
    picked = stream(seed, "prompt-subset").choice(n, size=limit, replace=False)
    return sorted(int(i) for i in picked)


# -- carry addition ---------------------------------------------------------


def _digits_lsb(value: int, base: int, width: int) -> list[int]:
    out = []
    for _ in range(width):
        out.append(value % base)
        value //= base
    return out


def make_carry_addition_task(
    digits: int,
    base: int,
    *,
    seed: int = 0,
    evaluator: str = "binary",
    soft_beta: float = 1.0,
    wrong_penalty: float = -3.0,
    prompt_limit: int | None = None,
    cap: int = ENUMERATION_CAP,
) -> GenerativeTask:
    """Multi-digit addition with an explicit carry-chain rationale.

    Prompts are all pairs of `digits`-digit base-`base` numbers.  A latent
    spells out, least-significant position first, the digit result and the
    carry-out of every column; a response is a candidate sum written with
    digits+1 base-`base` digits, most significant first.  The verifier
    accepts exactly the latent that follows correct carry arithmetic for
    the prompt together with the response it implies.
    """
    if digits < 1 or base < 2:
        raise ValueError("need digits >= 1 and base >= 2")
    n_latents = (2 * base) ** digits
    n_responses = base ** (digits + 1)
    if n_latents * n_responses > cap:
        raise CapExceededError(
            f"|Z|*|Y| = {n_latents * n_responses} exceeds cap {cap}"
        )

    eos = base
    vocab = Vocabulary(size=base + 1, eos=eos)

    n_numbers = base**digits
    pairs = [(a, b) for a in range(n_numbers) for b in range(n_numbers)]
    keep = _subsample_prompts(len(pairs), prompt_limit, seed)
    pairs = [pairs[i] for i in keep]

    def fmt(v: int) -> str:
        return "".join(str(d) for d in reversed(_digits_lsb(v, base, digits)))

    prompts = tuple(f"{fmt(a)}+{fmt(b)}" for a, b in pairs)

    latents = tuple(
        TokenSequence(ids + (eos,))
        for ids in sorted(
            tuple(t for pos in combo for t in pos)
            for combo in _product_positions(digits, base)
        )
    )
    responses = tuple(
        TokenSequence(tuple(reversed(_digits_lsb(v, base, digits + 1))) + (eos,))
        for v in range(n_responses)
    )
    # base-b strings sorted MSB-first == numeric order; keep explicit sort
    responses = tuple(sorted(responses, key=lambda s: s.ids))

    latent_index = {seq.ids: i for i, seq in enumerate(latents)}
    response_index = {seq.ids: i for i, seq in enumerate(responses)}

    def correct_chain(a: int, b: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        da, db = _digits_lsb(a, base, digits), _digits_lsb(b, base, digits)
        z_ids: list[int] = []
        carry = 0
        for i in range(digits):
            t = da[i] + db[i] + carry
            z_ids.extend((t % base, t // base))
            carry = t // base
        y_ids = tuple(reversed(_digits_lsb(a + b, base, digits + 1)))
        return tuple(z_ids) + (eos,), y_ids + (eos,)

    truth: dict[int, tuple[int, int]] = {}
    for x_idx, (a, b) in enumerate(pairs):
        z_ids, y_ids = correct_chain(a, b)
        truth[x_idx] = (latent_index[z_ids], response_index[y_ids])

    def verify(x: int, z: int, y: int) -> bool:
        return (z, y) == truth[x]

    ev, kind = _make_evaluator(verify, evaluator, soft_beta, wrong_penalty)
    horizon = (2 * digits + 1) + (digits + 2)
    return GenerativeTask(
        name=f"carry-addition-d{digits}-b{base}",
        vocab=vocab,
        prompts=prompts,
        rho=np.full(len(prompts), 1.0 / len(prompts)),
        latents=latents,
        responses=responses,
        obs_values=(0, 1),
        evaluator=ev,
        evaluator_kind=kind,
        horizon=horizon,
        seed=seed,
        params={
            "factory": "carry_addition",
            "digits": digits,
            "base": base,
            "seed": seed,
            "evaluator": evaluator,
            "soft_beta": soft_beta,
            "wrong_penalty": wrong_penalty,
            "prompt_limit": prompt_limit,
            "cap": cap,
        },
        truth=truth,
    )


def _product_positions(digits: int, base: int):
    """All per-position (sum_digit, carry) choices, one tuple per position."""
    position_choices = [(s, c) for s in range(base) for c in (0, 1)]
    combos: list[tuple[tuple[int, int], ...]] = [()]
    for _ in range(digits):
        combos = [prev + (choice,) for prev in combos for choice in position_choices]
    return combos


# -- automaton traces --------------------------------------------------------


def make_automaton_trace_task(
    num_states: int,
    input_len: int,
    *,
    seed: int = 0,
    evaluator: str = "binary",
    soft_beta: float = 1.0,
    wrong_penalty: float = -3.0,
    prompt_limit: int | None = None,
    cap: int = ENUMERATION_CAP,
) -> GenerativeTask:
    """State-trace explanation of a random DFA over binary inputs.

    Prompts are the 2**input_len binary input strings.  A latent claims the
    state visited after each input symbol (start state 0); the response is
    a single accept/reject token.  The verifier accepts exactly the true
    state trace paired with the label the DFA assigns.
    """
    if num_states < 2 or input_len < 1:
        raise ValueError("need num_states >= 2 and input_len >= 1")
    n_latents = num_states**input_len
    if n_latents * 2 > cap:
        raise CapExceededError(f"|Z|*|Y| = {n_latents * 2} exceeds cap {cap}")

    accept_tok = num_states
    reject_tok = num_states + 1
    eos = num_states + 2
    vocab = Vocabulary(size=num_states + 3, eos=eos)

    rng = stream(seed, "automaton")
    delta = rng.integers(0, num_states, size=(num_states, 2))
    n_accepting = int(rng.integers(1, num_states))
    accepting = set(
        int(s) for s in rng.choice(num_states, size=n_accepting, replace=False)
    )

    all_prompts = [
        format(i, f"0{input_len}b") for i in range(2**input_len)
    ]
    keep = _subsample_prompts(len(all_prompts), prompt_limit, seed)
    prompts = tuple(all_prompts[i] for i in keep)

    traces: list[tuple[int, ...]] = [()]
    for _ in range(input_len):
        traces = [t + (s,) for t in traces for s in range(num_states)]
    latents = tuple(TokenSequence(t + (eos,)) for t in sorted(traces))
    responses = (
        TokenSequence((accept_tok, eos)),
        TokenSequence((reject_tok, eos)),
    )

    latent_index = {seq.ids: i for i, seq in enumerate(latents)}

    truth: dict[int, tuple[int, int]] = {}
    for x_idx, bits in enumerate(prompts):
        state = 0
        trace: list[int] = []
        for ch in bits:
            state = int(delta[state][int(ch)])
            trace.append(state)
        y_idx = 0 if state in accepting else 1
        truth[x_idx] = (latent_index[tuple(trace) + (eos,)], y_idx)

    def verify(x: int, z: int, y: int) -> bool:
        return (z, y) == truth[x]

    ev, kind = _make_evaluator(verify, evaluator, soft_beta, wrong_penalty)
    return GenerativeTask(
        name=f"automaton-trace-s{num_states}-l{input_len}",
        vocab=vocab,
        prompts=prompts,
        rho=np.full(len(prompts), 1.0 / len(prompts)),
        latents=latents,
        responses=responses,
        obs_values=(0, 1),
        evaluator=ev,
        evaluator_kind=kind,
        horizon=(input_len + 1) + 2,
        seed=seed,
        params={
            "factory": "automaton_trace",
            "num_states": num_states,
            "input_len": input_len,
            "seed": seed,
            "evaluator": evaluator,
            "soft_beta": soft_beta,
            "wrong_penalty": wrong_penalty,
            "prompt_limit": prompt_limit,
            "cap": cap,
        },
        truth=truth,
    )


# -- reward-tagged generation -------------------------------------------------


def make_reward_tag_task(
    n_prompts: int,
    n_responses: int,
    *,
    seed: int = 0,
    evaluator: str = "binary",
    soft_beta: float = 1.0,
    wrong_penalty: float = -3.0,
    cap: int = ENUMERATION_CAP,
) -> GenerativeTask:
    """Single-token responses with a two-valued reward tag as the latent.

    Each prompt has one seeded correct response.  The latent space is the
    tag alphabet {bad, good}; the verifier accepts (tag=good, correct y)
    and (tag=bad, incorrect y), so a tag is the reward annotation of the
    response it precedes.
    """
    if n_prompts < 1 or n_responses < 2:
        raise ValueError("need n_prompts >= 1 and n_responses >= 2")
    if 2 * n_responses > cap:
        raise CapExceededError(f"|Z|*|Y| = {2 * n_responses} exceeds cap {cap}")

    bad_tok, good_tok = 0, 1
    resp_base = 2
    eos = resp_base + n_responses
    vocab = Vocabulary(size=n_responses + 3, eos=eos)

    latents = (TokenSequence((bad_tok, eos)), TokenSequence((good_tok, eos)))
    responses = tuple(TokenSequence((resp_base + j, eos)) for j in range(n_responses))
    prompts = tuple(f"p{i}" for i in range(n_prompts))
    correct = {
        i: int(v)
        for i, v in enumerate(stream(seed, "tag-truth").integers(0, n_responses, n_prompts))
    }

    def verify(x: int, z: int, y: int) -> bool:
        return (z == 1) == (y == correct[x])

    ev, kind = _make_evaluator(verify, evaluator, soft_beta, wrong_penalty)
    return GenerativeTask(
        name=f"reward-tag-p{n_prompts}-r{n_responses}",
        vocab=vocab,
        prompts=prompts,
        rho=np.full(n_prompts, 1.0 / n_prompts),
        latents=latents,
        responses=responses,
        obs_values=(0, 1),
        evaluator=ev,
        evaluator_kind=kind,
        horizon=4,
        seed=seed,
        params={
            "factory": "reward_tag",
            "n_prompts": n_prompts,
            "n_responses": n_responses,
            "seed": seed,
            "evaluator": evaluator,
            "soft_beta": soft_beta,
            "wrong_penalty": wrong_penalty,
            "cap": cap,
        },
        truth={i: (1, correct[i]) for i in range(n_prompts)},
    )


GOOD_TAG = 1
BAD_TAG = 0


# -- serialization ------------------------------------------------------------

_FACTORIES = {
    "carry_addition": make_carry_addition_task,
    "automaton_trace": make_automaton_trace_task,
    "reward_tag": make_reward_tag_task,
}


def task_document(task: GenerativeTask, event: EventSpec | None = None) -> str:
    """Structured text (JSON) describing a factory-built task.

    Events are stored materialized; predicate events are made explicit
    first so the document round-trips without executable content.
    """
    if task.params is None or "factory" not in task.params:
        raise RecordFormatError(
            f"task {task.name} was not built by a registered factory and "
            "cannot be serialized"
        )
    doc = {
        "name": task.name,
        "seed": task.seed,
        "factory_params": task.params,
        "vocab": {"size": task.vocab.size, "eos": task.vocab.eos},
        "horizon": task.horizon,
        "sizes": {
            "prompts": task.n_prompts,
            "latents": task.n_latents,
            "responses": task.n_responses,
        },
        "evaluator_kind": task.evaluator_kind,
    }
    if event is not None:
        ev = explicit_event(task, event)
        doc["event"] = {
            "latents": list(ev.latents),
            "responses": list(ev.responses),
            "obs": list(ev.obs),
        }
    return json.dumps(doc, indent=2, sort_keys=True)


def task_from_document(text: str) -> tuple[GenerativeTask, EventSpec | None]:
    """Rebuild a task (and optional event) from `task_document` output."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"task document is not valid JSON: {exc}") from exc
    try:
        params = dict(doc["factory_params"])
        factory_name = params.pop("factory")
        factory = _FACTORIES[factory_name]
    except KeyError as exc:
        raise RecordFormatError(f"task document missing factory info: {exc}") from exc
    task = factory(**params)
    sizes = doc.get("sizes", {})
    got = {
        "prompts": task.n_prompts,
        "latents": task.n_latents,
        "responses": task.n_responses,
    }
    if sizes != got:
        raise RecordFormatError(f"document sizes {sizes} disagree with rebuilt {got}")
    event = None
    if "event" in doc:
        ev = doc["event"]
        event = EventSpec(
            latents=tuple(ev["latents"]),
            responses=tuple(ev["responses"]),
            obs=tuple(ev["obs"]),
        )
    return task, event
