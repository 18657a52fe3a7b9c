"""Interchangeable engines for the posterior-inference half of training.

Each engine answers the same question at one prompt: given the current
sequence model and an event, what is (or approximately is) the conditional
distribution over (z, y) pairs inside the event?  Four routes are provided:

* ``exact``            enumeration of the posterior table,
* ``planning``         soft value iteration on shaped token rewards,
* ``rejection``        sampling from the model and keeping event hits,
* ``policy_gradient``  entropy-regularized ascent toward the posterior.

All engines return an `EStepResult` whose `support`/`probs` pair feeds the
parameter update directly, plus diagnostics (total variation against the
exact posterior, sample counts, engine-specific extras).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, UnreachableEventError
from .graph import JointModel
from .logspace import log_sum_exp, safe_log
from .models import LogitModel
from .planner import plan_posterior, shape_rewards, soft_value_iteration
from .tasks import EventSpec, event_zy_support, materialize_event

Pair = tuple[int, int]


@dataclass
class EStepResult:
    """One engine's answer at one prompt.

    `support` and `probs` align; probs sum to 1 unless the engine came back
    empty-handed (flagged ``zero_acceptance``, in which case both are empty
    and the caller must skip the prompt).  `tv_error` is the total variation
    distance to the exact posterior marginal, `None` when undefined.
    """

    backend: str
    support: list[Pair]
    probs: np.ndarray
    tv_error: float | None = None
    samples_used: int = 0
    acceptance_rate: float | None = None
    wall_time_s: float = 0.0
    flags: tuple[str, ...] = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.support),):
            raise ValueError(
                f"{len(self.support)} support pairs but probs shape {self.probs.shape}"
            )
        if "zero_acceptance" in self.flags:
            if len(self.support) != 0:
                raise ValueError("zero-acceptance results must have empty support")
        elif abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probs sum to {self.probs.sum():.12g}, expected 1")

    @property
    def empty(self) -> bool:
        return "zero_acceptance" in self.flags


@dataclass
class EStepSpec:
    """Backend name plus keyword parameters for `run_estep`."""

    backend: str
    params: dict = field(default_factory=dict)


def _exact_marginal(
    jm: JointModel, x_idx: int, event: EventSpec
) -> tuple[list[Pair], np.ndarray]:
    posterior = jm.exact_posterior(x_idx, event)
    return posterior.zy_marginal()


def tv_to_exact(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    support: list[Pair],
    probs: np.ndarray,
) -> float:
    """Total variation between a candidate distribution and the posterior.

    Supports need not coincide; mass is compared over the union of pairs.
    """
    exact_pairs, exact_probs = _exact_marginal(jm, x_idx, event)
    reference = dict(zip(exact_pairs, exact_probs))
    candidate: dict[Pair, float] = {}
    for pair, p in zip(support, probs):
        candidate[pair] = candidate.get(pair, 0.0) + float(p)
    keys = set(reference) | set(candidate)
    return 0.5 * sum(
        abs(candidate.get(k, 0.0) - reference.get(k, 0.0)) for k in keys
    )


# -- exact enumeration -----------------------------------------------------


def estep_exact(jm: JointModel, x_idx: int, event: EventSpec) -> EStepResult:
    """Posterior over (z, y) by direct enumeration of the event."""
    pairs, probs = _exact_marginal(jm, x_idx, event)
    return EStepResult(
        backend="exact", support=pairs, probs=probs, tv_error=0.0
    )


# -- soft planning ---------------------------------------------------------


def estep_planning(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    beta: float = 1.0,
    compare_exact: bool = True,
) -> EStepResult:
    """Posterior via soft value iteration on shaped token rewards.

    At ``beta = 1`` the induced trajectory distribution matches the exact
    posterior up to clamp leakage; other temperatures give a deliberately
    sharpened or flattened variant (useful as a diagnostic, not an E-step).
    """
    mdp = shape_rewards(jm, x_idx, event, beta=beta)
    plan = soft_value_iteration(mdp)
    support, probs = plan_posterior(plan, jm.task, x_idx, event)
    tv = tv_to_exact(jm, x_idx, event, support, probs) if compare_exact else None
    return EStepResult(
        backend="planning",
        support=support,
        probs=probs,
        tv_error=tv,
        extras={"beta": beta, "root_value": plan.root_value()},
    )


# -- rejection / importance sampling ---------------------------------------


def estep_rejection(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    budget: int,
    rng: np.random.Generator,
    compare_exact: bool = True,
) -> EStepResult:
    """Sample (z, y) from the model; keep draws by event observation mass.

    Binary evaluators make this plain rejection (weights are 0 or 1).  Soft
    evaluators yield fractional weights, turning the estimate into
    self-normalized importance sampling; the result is flagged
    ``importance_weighted``.  A budget that produces no usable draw returns
    the empty, ``zero_acceptance``-flagged result.
    """
    if budget <= 0:
        raise ConfigError(f"rejection budget must be positive, got {budget}")
    task = jm.task
    support = event_zy_support(task, event)
    index = {pair: i for i, pair in enumerate(support)}
    _, _, o_idx = materialize_event(task, event)
    obs = [task.obs_values[i] for i in o_idx]

    view = jm.seq.conditional_tables(x_idx)
    weights = np.zeros(len(support))
    hits = 0
    for _ in range(budget):
        pair = view.sample(rng)
        pos = index.get(pair)
        if pos is None:
            continue
        zi, yi = pair
        mass = sum(task.evaluator(x_idx, zi, yi, o) for o in obs)
        if mass > 0.0:
            weights[pos] += mass
            hits += 1

    flags: tuple[str, ...] = ()
    if task.evaluator_kind == "soft":
        flags += ("importance_weighted",)
    total = float(weights.sum())
    if total == 0.0:
        return EStepResult(
            backend="rejection",
            support=[],
            probs=np.zeros(0),
            tv_error=None,
            samples_used=budget,
            acceptance_rate=0.0,
            flags=flags + ("zero_acceptance",),
        )
    probs = weights / total
    tv = tv_to_exact(jm, x_idx, event, support, probs) if compare_exact else None
    return EStepResult(
        backend="rejection",
        support=support,
        probs=probs,
        tv_error=tv,
        samples_used=budget,
        acceptance_rate=hits / budget,
        flags=flags,
    )


# -- entropy-regularized policy gradient ------------------------------------


@dataclass
class PolicyGradConfig:
    """Knobs for `estep_policy_gradient`.

    ``batch_size = 0`` requests exact gradients of the regularized return
    (no sampling, line-searched and therefore monotone); a positive batch
    size switches to score-function estimates.  ``reward_floor`` caps how
    negative the terminal event bonus may get: the floor keeps gradients
    bounded while leaking only exp(reward_floor) probability outside the
    event, far below the fixed-point tolerances checked downstream.
    """

    step_size: float = 0.25
    batch_size: int = 0
    iterations: int = 200
    beta: float = 1.0
    baseline: str = "mean_return"
    reward_floor: float = -30.0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0, got {self.batch_size}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.baseline not in ("mean_return", "none"):
            raise ConfigError(
                f"baseline must be 'mean_return' or 'none', got {self.baseline!r}"
            )
        if self.reward_floor >= 0:
            raise ConfigError(
                f"reward_floor must be negative, got {self.reward_floor}"
            )
        if self.divergence_patience < 1:
            raise ConfigError(
                f"divergence_patience must be >= 1, got {self.divergence_patience}"
            )


def _event_reward_vector(
    jm: JointModel, x_idx: int, event: EventSpec, floor: float
) -> np.ndarray:
    """Total reward per (z, y) pair: reference log prob plus floored bonus.

    The bonus is the log evaluator mass of the event's observations, floored
    (rather than clamped to an effective -inf) so gradient magnitudes stay
    usable.  Raises if no pair carries positive event mass.
    """
    task = jm.task
    allowed = set(event_zy_support(task, event))
    _, _, o_idx = materialize_event(task, event)
    obs = [task.obs_values[i] for i in o_idx]

    bonus = np.full(task.n_joint, floor)
    reachable = False
    for zi, yi in allowed:
        mass = sum(task.evaluator(x_idx, zi, yi, o) for o in obs)
        if mass > 0.0:
            bonus[task.zy_index(zi, yi)] = max(safe_log(mass), floor)
            reachable = True
    if not reachable:
        raise UnreachableEventError(
            f"event {event.describe()} has zero evaluator mass at prompt {x_idx}"
        )
    return jm.seq.joint_log_probs(x_idx) + bonus


def _regularized_objective(
    policy: LogitModel, x_idx: int, rewards: np.ndarray, beta: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """J(psi) = E_p[R] + beta H(p), with p = softmax of the policy logits.

    Returns (J, p, log p, flat gradient dJ/dlogits); the flat gradient is
    p * (c - J) with c = R - beta log p.  log p stays finite even where p
    underflows, so advantage-like quantities built from it are safe.
    """
    log_p = policy.joint_log_probs(x_idx)
    with np.errstate(under="ignore"):
        p = np.exp(log_p)
    mask = p > 0.0
    c = rewards - beta * log_p
    value = float(np.dot(p[mask], c[mask]))
    grad_flat = np.where(mask, p * (c - value), 0.0)
    return value, p, log_p, grad_flat


def estep_policy_gradient(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    cfg: PolicyGradConfig | None = None,
    rng: np.random.Generator | None = None,
    compare_exact: bool = True,
) -> EStepResult:
    """Train a sampler toward the posterior by entropy-regularized ascent.

    The sampler is warm-started at the current model and climbs
    J(psi) = E_psi[R] + beta H(psi) where R sums the reference log
    probability and the floored event bonus; the maximizer of J is the
    softmax of R / beta, i.e. the posterior up to floor leakage.  Exact mode
    (``batch_size = 0``) line-searches every step and is monotone in J;
    sampled mode uses REINFORCE with an optional mean-return baseline and
    raises `DivergenceError` after `divergence_patience` consecutive drops
    of the exactly-evaluated objective.

    The returned support is the full (z, y) space: conditioning by reward
    shaping leaves a sliver of mass outside the event, and hiding it would
    misreport what the sampler actually does.
    """
    cfg = cfg if cfg is not None else PolicyGradConfig()
    if cfg.batch_size > 0 and rng is None:
        raise ConfigError("sampled policy-gradient mode needs an rng")
    task = jm.task
    rewards = _event_reward_vector(jm, x_idx, event, cfg.reward_floor)
    policy = jm.seq.with_theta(jm.seq.theta)

    value, p, log_p, grad_flat = _regularized_objective(
        policy, x_idx, rewards, cfg.beta
    )
    drops = 0
    samples_used = 0
    iterations_run = 0
    rate = cfg.step_size
    for _ in range(cfg.iterations):
        if cfg.batch_size == 0:
            # Try the advantage direction c - J first: through a tabular
            # map a full step of 1/beta lands exactly on the soft-optimal
            # policy, and line search tames it everywhere else.  If it is
            # not an ascent direction for this feature map, fall back to
            # the plain gradient.  Strict-improvement backtracking keeps
            # the climb monotone either way; when neither direction
            # improves, the policy is at a numerical optimum.
            natural_flat = (rewards - cfg.beta * log_p) - value
            accepted = False
            for flat, persistent in ((natural_flat, True), (grad_flat, False)):
                direction = policy.features.adjoint(x_idx, flat)
                if float(np.linalg.norm(direction)) == 0.0:
                    continue
                trial = rate if persistent else cfg.step_size
                for _ in range(40):
                    candidate = policy.with_theta(policy.theta + trial * direction)
                    new_value, new_p, new_log_p, new_grad = _regularized_objective(
                        candidate, x_idx, rewards, cfg.beta
                    )
                    if new_value > value:
                        policy, value = candidate, new_value
                        p, log_p, grad_flat = new_p, new_log_p, new_grad
                        accepted = True
                        if persistent:
                            rate = trial * 1.5
                        break
                    trial *= 0.5
                if accepted:
                    break
            iterations_run += 1
            if not accepted:
                break
        else:
            draws = rng.choice(task.n_joint, size=cfg.batch_size, p=p)
            returns = rewards[draws] - cfg.beta * log_p[draws]
            baseline = returns.mean() if cfg.baseline == "mean_return" else 0.0
            advantage = returns - baseline
            step_flat = np.zeros(task.n_joint)
            np.add.at(step_flat, draws, advantage)
            step_flat = step_flat / cfg.batch_size - p * advantage.mean()
            samples_used += cfg.batch_size
            direction = policy.features.adjoint(x_idx, step_flat)
            if float(np.linalg.norm(direction)) == 0.0:
                break
            policy = policy.with_theta(policy.theta + cfg.step_size * direction)
            new_value, p, log_p, grad_flat = _regularized_objective(
                policy, x_idx, rewards, cfg.beta
            )
            drops = drops + 1 if new_value < value else 0
            if drops >= cfg.divergence_patience:
                raise DivergenceError(
                    f"objective fell for {drops} consecutive steps "
                    f"(last {value:.6g} -> {new_value:.6g})"
                )
            value = new_value
            iterations_run += 1

    support = [task.zy_unindex(i) for i in range(task.n_joint)]
    probs = policy.joint_probs(x_idx)
    probs = probs / probs.sum()
    tv = tv_to_exact(jm, x_idx, event, support, probs) if compare_exact else None
    soft_value = cfg.beta * log_sum_exp(rewards / cfg.beta)
    event_pairs = set(event_zy_support(task, event))
    off_event = float(
        sum(p_ for pair, p_ in zip(support, probs) if pair not in event_pairs)
    )
    return EStepResult(
        backend="policy_gradient",
        support=support,
        probs=probs,
        tv_error=tv,
        samples_used=samples_used,
        extras={
            "final_objective": value,
            "soft_value": soft_value,
            "iterations_run": iterations_run,
            "off_event_mass": off_event,
        },
    )


# -- dispatch ----------------------------------------------------------------

BACKENDS = ("exact", "planning", "rejection", "policy_gradient")


def run_estep(
    jm: JointModel,
    x_idx: int,
    event: EventSpec,
    spec: EStepSpec,
    rng: np.random.Generator | None = None,
) -> EStepResult:
    """Dispatch one E-step and stamp its wall time on the result."""
    start = time.perf_counter()
    if spec.backend == "exact":
        result = estep_exact(jm, x_idx, event)
    elif spec.backend == "planning":
        result = estep_planning(jm, x_idx, event, **spec.params)
    elif spec.backend == "rejection":
        if rng is None:
            raise ConfigError("rejection backend needs an rng")
        result = estep_rejection(jm, x_idx, event, rng=rng, **spec.params)
    elif spec.backend == "policy_gradient":
        cfg = PolicyGradConfig(**spec.params)
        result = estep_policy_gradient(jm, x_idx, event, cfg=cfg, rng=rng)
    else:
        raise ConfigError(
            f"unknown e-step backend {spec.backend!r}; expected one of {BACKENDS}"
        )
    result.wall_time_s = time.perf_counter() - start
    return result
