"""Joint distribution over (rationale, response, observation) and its
event-restricted log likelihood.

The graph factorizes as P(z, y, o | x) = P(z, y | x, theta) * P(o | x, z, y)
with the second factor fixed by the task evaluator.  The central scalar is
the log probability of an event (a restriction of the three spaces); its
exact posterior, evidence lower bound, and parameter gradient are all
available by enumeration.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import UnnormalizedVariationalError, ZeroMassEventError
from .logspace import entropy, log_sum_exp, safe_log
from .models import LogitModel
from .tasks import EventSpec, GenerativeTask, enumerate_event


@dataclass
class PosteriorTable:
    """Exact conditional distribution over an event's triples.

    `support` lists (z_idx, y_idx, o) in event enumeration order; `probs`
    aligns with it and sums to 1.  `log_normalizer` is the event log
    probability that normalized the table.
    """

    support: list[tuple[int, int, int]]
    probs: np.ndarray
    log_normalizer: float

    def zy_support(self) -> list[tuple[int, int]]:
        """Distinct (z_idx, y_idx) pairs in first-appearance order."""
        seen: dict[tuple[int, int], None] = {}
        for z, y, _ in self.support:
            seen.setdefault((z, y), None)
        return list(seen)

    def zy_marginal(self) -> tuple[list[tuple[int, int]], np.ndarray]:
        """Marginal over (z, y) pairs, observations summed out."""
        pairs = self.zy_support()
        index = {pair: i for i, pair in enumerate(pairs)}
        out = np.zeros(len(pairs))
        for (z, y, _), p in zip(self.support, self.probs):
            out[index[(z, y)]] += p
        return pairs, out


@dataclass
class ElboReport:
    value: float
    log_likelihood: float

    @property
    def gap(self) -> float:
        return self.log_likelihood - self.value


class _EventTable:
    """Per-event index cache: triples, flat (z, y) indices, evaluator logs."""

    def __init__(self, task: GenerativeTask, event: EventSpec):
        self.event = event
        self.triples = enumerate_event(task, event)
        self.zy_idx = np.fromiter(
            (task.zy_index(z, y) for z, y, _ in self.triples),
            dtype=np.int64,
            count=len(self.triples),
        )
        self._task = task
        self._log_eval: dict[int, np.ndarray] = {}

    def log_eval(self, x_idx: int) -> np.ndarray:
        cached = self._log_eval.get(x_idx)
        if cached is None:
            cached = np.array(
                [
                    safe_log(self._task.evaluator(x_idx, z, y, o))
                    for z, y, o in self.triples
                ]
            )
            self._log_eval[x_idx] = cached
        return cached


# Keyed by task so tables survive across the models built each iteration.
_EVENT_TABLES: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _event_table(task: GenerativeTask, event: EventSpec) -> _EventTable:
    tables = _EVENT_TABLES.setdefault(task, [])
    for table in tables:
        if table.event is event:
            return table
    table = _EventTable(task, event)
    tables.append(table)
    return table


class JointModel:
    """A sequence model coupled with a task's observation factor."""

    def __init__(self, seq: LogitModel, task: GenerativeTask | None = None):
        task = task if task is not None else seq.task
        if task is not seq.task:
            raise ValueError("sequence model belongs to a different task")
        self.seq = seq
        self.task = task

    def triple_logprob(self, x_idx: int, z_idx: int, y_idx: int, o: int) -> float:
        """log P(z, y, o | x); -inf when the evaluator assigns o zero mass."""
        lp_zy = self.seq.joint_logprob(x_idx, z_idx, y_idx)
        return lp_zy + safe_log(self.task.evaluator_prob(x_idx, z_idx, y_idx, o))

    def triple_prob(self, x_idx: int, z_idx: int, y_idx: int, o: int) -> float:
        return float(np.exp(self.triple_logprob(x_idx, z_idx, y_idx, o)))

    def event_table(self, event: EventSpec) -> _EventTable:
        return _event_table(self.task, event)

    def _event_terms(
        self, x_idx: int, event: EventSpec
    ) -> tuple[list[tuple[int, int, int]], np.ndarray]:
        table = self.event_table(event)
        lp_zy = self.seq.joint_log_probs(x_idx)
        terms = lp_zy[table.zy_idx] + table.log_eval(x_idx)
        return table.triples, terms

    def event_logprob(self, x_idx: int, event: EventSpec) -> float:
        """log P(event | x, theta); -inf signals a zero-mass (not invalid) event."""
        _, terms = self._event_terms(x_idx, event)
        return log_sum_exp(terms)

    def exact_posterior(self, x_idx: int, event: EventSpec) -> PosteriorTable:
        """Q(z, y, o) proportional to P(z, y, o | x) restricted to the event."""
        triples, terms = self._event_terms(x_idx, event)
        total = log_sum_exp(terms)
        if total == -np.inf:
            raise ZeroMassEventError(
                f"event {event.describe()} has zero mass at prompt {x_idx}"
            )
        with np.errstate(under="ignore"):
            probs = np.exp(terms - total)
        return PosteriorTable(support=triples, probs=probs, log_normalizer=total)

    def elbo(self, x_idx: int, event: EventSpec, q: np.ndarray) -> ElboReport:
        """Evidence lower bound E_q[log P(z, y, o | x)] + H(q).

        `q` aligns with the event enumeration.  Equals the event log
        probability exactly when q is the exact posterior; never exceeds it.
        """
        triples, terms = self._event_terms(x_idx, event)
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (len(triples),):
            raise UnnormalizedVariationalError(
                f"variational weights have shape {q.shape}, event has {len(triples)} triples"
            )
        if np.any(q < -1e-12) or abs(q.sum() - 1.0) > 1e-9:
            raise UnnormalizedVariationalError(
                f"variational weights sum to {q.sum():.12g}, expected 1"
            )
        mask = q > 0.0
        value = float(np.dot(q[mask], terms[mask])) + entropy(q)
        return ElboReport(value=value, log_likelihood=log_sum_exp(terms))

    def grad_event_logprob(self, x_idx: int, event: EventSpec) -> np.ndarray:
        """d/dtheta log P(event | x): posterior minus model feature means."""
        posterior = self.exact_posterior(x_idx, event)
        pairs, q_zy = posterior.zy_marginal()
        q_vec = np.zeros(self.task.n_joint)
        for (z, y), p in zip(pairs, q_zy):
            q_vec[self.task.zy_index(z, y)] += p
        p_vec = self.seq.joint_probs(x_idx)
        return self.seq.features.adjoint(x_idx, q_vec - p_vec)

    def averaged_event_logprob(self, event: EventSpec) -> float:
        """rho-weighted event log probability across all prompts."""
        task = self.task
        return float(
            sum(
                task.rho[x] * self.event_logprob(x, event)
                for x in range(task.n_prompts)
            )
        )

    def averaged_grad(self, event: EventSpec) -> np.ndarray:
        task = self.task
        grad = np.zeros(self.seq.features.dim)
        for x in range(task.n_prompts):
            grad += task.rho[x] * self.grad_event_logprob(x, event)
        return grad
