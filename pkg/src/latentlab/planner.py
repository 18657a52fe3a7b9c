"""Entropy-regularized planning on prefix-tree decision processes.

Trajectories are token sequences from a finite prefix-free set.  Soft value
iteration runs one backward pass with v(s) = beta * log sum_a exp(q(s,a) /
beta) and q(s,a) = r(s,a) + v(next), giving the policy pi(a|s) =
exp((q - v) / beta) whose trajectory distribution is proportional to
exp(total reward / beta).  Shaping a task model's token conditionals plus a
terminal event bonus at beta = 1 makes that distribution the exact event
posterior over (rationale, response) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import HorizonViolationError, UnreachableEventError
from .graph import JointModel
from .logspace import LOG_CLAMP, safe_log
from .tasks import EventSpec, event_zy_support, materialize_event

Prefix = tuple[int, ...]


@dataclass
class ShapedMdp:
    """Deterministic tree MDP over a prefix-free trajectory set.

    `nodes[prefix]` lists the available next tokens in ascending order and
    `rewards[prefix]` aligns with it.  `leaves` maps complete trajectories
    to an arbitrary payload (the planner reports distributions over
    payloads).  Appending an action either reaches another node or a leaf.
    """

    beta: float
    horizon: int
    nodes: dict[Prefix, np.ndarray]
    rewards: dict[Prefix, np.ndarray]
    leaves: dict[Prefix, object]
    root: Prefix = ()

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @classmethod
    def from_sequences(
        cls,
        seqs: Sequence[Prefix],
        reward_fn: Callable[[Prefix, int], float],
        beta: float,
        horizon: int | None = None,
        payloads: Sequence[object] | None = None,
    ) -> "ShapedMdp":
        """Build the prefix tree of `seqs` with rewards from `reward_fn`.

        `reward_fn` is invoked once per (prefix, action) edge, visiting
        prefixes in sorted order, so generator-backed reward functions are
        reproducible.  Sequences must be distinct and prefix-free.
        """
        seqs = [tuple(s) for s in seqs]
        if len(set(seqs)) != len(seqs):
            raise ValueError("duplicate trajectories")
        max_len = max((len(s) for s in seqs), default=0)
        horizon = max_len if horizon is None else horizon
        too_long = [s for s in seqs if len(s) > horizon]
        if too_long:
            raise HorizonViolationError(
                f"{len(too_long)} trajectories exceed horizon {horizon}"
            )
        leaf_set = set(seqs)
        children: dict[Prefix, set[int]] = {}
        for s in seqs:
            if len(s) == 0:
                raise ValueError("empty trajectory")
            for j in range(len(s)):
                prefix = s[:j]
                if prefix in leaf_set:
                    raise ValueError(
                        f"trajectory {prefix} is a prefix of {s}; set is not prefix-free"
                    )
                children.setdefault(prefix, set()).add(s[j])

        nodes: dict[Prefix, np.ndarray] = {}
        rewards: dict[Prefix, np.ndarray] = {}
        for prefix in sorted(children):
            acts = np.array(sorted(children[prefix]), dtype=np.int64)
            nodes[prefix] = acts
            rewards[prefix] = np.array(
                [reward_fn(prefix, int(a)) for a in acts], dtype=np.float64
            )
        if payloads is None:
            payload_map: dict[Prefix, object] = {s: None for s in seqs}
        else:
            payload_map = dict(zip(seqs, payloads))
        return cls(
            beta=beta,
            horizon=horizon,
            nodes=nodes,
            rewards=rewards,
            leaves=payload_map,
        )

    def is_leaf(self, prefix: Prefix) -> bool:
        return prefix in self.leaves

    def edges(self) -> Iterable[tuple[Prefix, int, float]]:
        for prefix, acts in self.nodes.items():
            for a, r in zip(acts, self.rewards[prefix]):
                yield prefix, int(a), float(r)


def random_shaped_mdp(
    rng: np.random.Generator,
    horizon: int,
    n_actions: int,
    beta: float,
    reward_scale: float = 1.0,
) -> ShapedMdp:
    """Full depth-`horizon` tree over `n_actions` tokens with normal rewards."""
    if horizon < 1 or n_actions < 1:
        raise ValueError("need horizon >= 1 and n_actions >= 1")
    seqs: list[Prefix] = [()]
    for _ in range(horizon):
        seqs = [s + (a,) for s in seqs for a in range(n_actions)]
    table: dict[tuple[Prefix, int], float] = {}

    def reward_fn(prefix: Prefix, action: int) -> float:
        key = (prefix, action)
        if key not in table:
            table[key] = float(rng.normal(0.0, reward_scale))
        return table[key]

    return ShapedMdp.from_sequences(seqs, reward_fn, beta, horizon=horizon)


@dataclass
class SoftPlan:
    """Backward-induction output: q, soft values, and the softmax policy."""

    mdp: ShapedMdp
    q: dict[Prefix, np.ndarray]
    v: dict[Prefix, float]
    log_policy: dict[Prefix, np.ndarray]

    def root_value(self) -> float:
        return self.v[self.mdp.root]


def soft_value_iteration(mdp: ShapedMdp) -> SoftPlan:
    """One exact backward pass; leaves have value 0 by definition."""
    v: dict[Prefix, float] = {leaf: 0.0 for leaf in mdp.leaves}
    q: dict[Prefix, np.ndarray] = {}
    log_policy: dict[Prefix, np.ndarray] = {}
    beta = mdp.beta
    for prefix in sorted(mdp.nodes, key=len, reverse=True):
        acts = mdp.nodes[prefix]
        child_v = np.array([v[prefix + (int(a),)] for a in acts])
        q_here = mdp.rewards[prefix] + child_v
        v_here = beta * float(logsumexp(q_here / beta))
        q[prefix] = q_here
        v[prefix] = v_here
        log_policy[prefix] = (q_here - v_here) / beta
    return SoftPlan(mdp=mdp, q=q, v=v, log_policy=log_policy)


def _suffix_walk(plan: SoftPlan, from_prefix: Prefix):
    """Yield (suffix, log prob) for completions of `from_prefix`, in
    lexicographic action order."""
    mdp = plan.mdp
    stack: list[tuple[Prefix, tuple[int, ...], float]] = [(from_prefix, (), 0.0)]
    while stack:
        prefix, suffix, lp = stack.pop()
        if mdp.is_leaf(prefix):
            yield suffix, lp
            continue
        acts = mdp.nodes[prefix]
        logp = plan.log_policy[prefix]
        for a, alp in zip(acts[::-1], logp[::-1]):
            stack.append((prefix + (int(a),), suffix + (int(a),), lp + float(alp)))


def trajectory_distribution(
    plan: SoftPlan, from_prefix: Prefix = ()
) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Suffix distribution induced by the soft-optimal policy from a state."""
    if not plan.mdp.is_leaf(from_prefix) and from_prefix not in plan.mdp.nodes:
        raise KeyError(f"state {from_prefix} is not in the tree")
    suffixes: list[tuple[int, ...]] = []
    logps: list[float] = []
    for suffix, lp in _suffix_walk(plan, from_prefix):
        suffixes.append(suffix)
        logps.append(lp)
    with np.errstate(under="ignore"):
        return suffixes, np.exp(np.array(logps))


def softmax_total_rewards(
    mdp: ShapedMdp, from_prefix: Prefix = ()
) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Brute-force reference: suffix probs proportional to exp(sum r / beta).

    Enumerates completions and softmaxes their summed rewards directly,
    with no value recursion; the planner's trajectory distribution must
    match this to floating-point accuracy.
    """
    suffixes: list[tuple[int, ...]] = []
    totals: list[float] = []
    stack: list[tuple[Prefix, tuple[int, ...], float]] = [(from_prefix, (), 0.0)]
    while stack:
        prefix, suffix, acc = stack.pop()
        if mdp.is_leaf(prefix):
            suffixes.append(suffix)
            totals.append(acc)
            continue
        acts = mdp.nodes[prefix]
        rews = mdp.rewards[prefix]
        for a, r in zip(acts[::-1], rews[::-1]):
            stack.append((prefix + (int(a),), suffix + (int(a),), acc + float(r)))
    scaled = np.array(totals) / mdp.beta
    with np.errstate(under="ignore"):
        probs = np.exp(scaled - logsumexp(scaled))
    return suffixes, probs / probs.sum()


def regularized_return(
    mdp: ShapedMdp, log_policy: dict[Prefix, np.ndarray], from_prefix: Prefix = ()
) -> float:
    """Exact E[sum r - beta * log pi] of an arbitrary policy from a state."""
    if mdp.is_leaf(from_prefix):
        return 0.0
    acts = mdp.nodes[from_prefix]
    rews = mdp.rewards[from_prefix]
    logp = log_policy[from_prefix]
    with np.errstate(under="ignore"):
        probs = np.exp(logp)
    total = 0.0
    for p, lp, a, r in zip(probs, logp, acts, rews):
        if p == 0.0:
            continue
        child = regularized_return(mdp, log_policy, from_prefix + (int(a),))
        total += p * (float(r) - mdp.beta * float(lp) + child)
    return total


def random_policy(
    mdp: ShapedMdp, rng: np.random.Generator
) -> dict[Prefix, np.ndarray]:
    """Independent random action distribution at every internal node."""
    out: dict[Prefix, np.ndarray] = {}
    for prefix in sorted(mdp.nodes, key=lambda p: (len(p), p)):
        probs = rng.dirichlet(np.ones(len(mdp.nodes[prefix])))
        out[prefix] = np.log(np.maximum(probs, 1e-300))
    return out


# -- event shaping -------------------------------------------------------------


def shape_rewards(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    beta: float = 1.0,
    terminal_sign_fault: bool = False,
) -> ShapedMdp:
    """Token-level rewards whose soft-optimal trajectories follow the event
    posterior at beta = 1.

    Every edge pays the reference model's conditional log probability, and
    the final edge of each trajectory additionally pays the log evaluator
    mass of the event's observation set (LOG_CLAMP outside the event's
    (z, y) rectangle or when that mass is zero).  Summing edge rewards
    therefore telescopes to log P(z, y | x) + log P(o in O_hat | x, z, y).

    `terminal_sign_fault` flips the sign of the terminal bonus; it exists
    so the verification harness can prove this check catches mutations.
    """
    task = jm.task
    view = jm.seq.conditional_tables(x_idx)
    allowed = set(event_zy_support(task, event))
    _, _, o_idx = materialize_event(task, event)
    obs = [task.obs_values[i] for i in o_idx]

    bonus: dict[Prefix, float] = {}
    payloads: list[tuple[int, int]] = []
    any_reachable = False
    for zi in range(task.n_latents):
        for yi in range(task.n_responses):
            seq = task.joint_tokens(zi, yi)
            payloads.append((zi, yi))
            if (zi, yi) in allowed:
                mass = sum(task.evaluator(x_idx, zi, yi, o) for o in obs)
                term = safe_log(mass)
                term = LOG_CLAMP if term == -np.inf else term
            else:
                term = LOG_CLAMP
            if term > LOG_CLAMP:
                any_reachable = True
            bonus[seq] = -term if terminal_sign_fault else term
    if not any_reachable:
        raise UnreachableEventError(
            f"event {event.describe()} clamps every trajectory at prompt {x_idx}"
        )

    def reward_fn(prefix: Prefix, action: int) -> float:
        r = view.token_logprob(prefix, action)
        full = prefix + (action,)
        if full in bonus:
            r += bonus[full]
        return r

    seqs = list(task.joint_sequences)
    return ShapedMdp.from_sequences(
        seqs, reward_fn, beta, horizon=task.horizon, payloads=payloads
    )


def plan_posterior(
    plan: SoftPlan, task, x_idx: int, event: EventSpec
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Planner distribution over the event's (z, y) support.

    Clamped trajectories (outside the event rectangle, or inside it with
    zero evaluator mass on the event's observations) must carry essentially
    no probability; that is asserted, then the distribution is renormalized
    over the event support.
    """
    support = event_zy_support(task, event)
    index = {pair: i for i, pair in enumerate(support)}
    _, _, o_idx = materialize_event(task, event)
    obs = [task.obs_values[i] for i in o_idx]

    def is_clamped(pair: tuple[int, int] | None) -> bool:
        if pair is None or pair not in index:
            return True
        zi, yi = pair
        return sum(task.evaluator(x_idx, zi, yi, o) for o in obs) == 0.0

    probs = np.zeros(len(support))
    clamped_mass = 0.0
    suffixes, traj_probs = trajectory_distribution(plan)
    for suffix, p in zip(suffixes, traj_probs):
        payload = plan.mdp.leaves[suffix]
        pos = index.get(payload)
        if pos is not None:
            probs[pos] += p
        if is_clamped(payload):
            clamped_mass = max(clamped_mass, float(p))
    assert clamped_mass <= 1e-300, (
        f"clamped trajectory keeps probability {clamped_mass:g}"
    )
    total = probs.sum()
    if total <= 0.0:
        raise UnreachableEventError("no event trajectory carries mass")
    return support, probs / total
