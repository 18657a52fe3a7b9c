import numpy as np
import pytest

from latentlab.errors import CapExceededError, EmptyEventError, OutOfSpaceError
from latentlab.tasks import (
    EventSpec,
    enumerate_event,
    evaluator_normalization_gap,
    event_zy_support,
    explicit_event,
    full_event,
    make_automaton_trace_task,
    make_carry_addition_task,
    make_reward_tag_task,
    materialize_event,
    success_event,
    task_document,
    task_from_document,
)


def test_carry_counts():
    task = make_carry_addition_task(1, 3)
    assert (task.n_prompts, task.n_latents, task.n_responses) == (9, 6, 9)
    assert task.n_joint == 54


def test_automaton_counts():
    task = make_automaton_trace_task(2, 3)
    assert (task.n_prompts, task.n_latents, task.n_responses) == (8, 8, 2)


def test_tag_counts():
    task = make_reward_tag_task(3, 4)
    assert (task.n_prompts, task.n_latents, task.n_responses) == (3, 2, 4)


def test_prompt_limit_truncates():
    task = make_carry_addition_task(1, 10, prompt_limit=4)
    assert task.n_prompts == 4
    assert task.n_joint == 2000


def test_rho_normalized(tag_task):
    assert tag_task.rho.sum() == pytest.approx(1.0, abs=1e-15)


def test_evaluator_rows_normalize(tag_task):
    assert evaluator_normalization_gap(tag_task) <= 1e-12
    soft = make_reward_tag_task(2, 3, evaluator="soft")
    assert evaluator_normalization_gap(soft) <= 1e-12


def test_truth_is_verified(tag_task):
    for x, (z, y) in tag_task.truth.items():
        assert tag_task.success_prob(x, z, y) == 1.0


def test_event_enumeration_order(tag_task):
    triples = enumerate_event(tag_task, full_event())
    pairs = [(z, y) for z, y, _ in triples]
    seen = list(dict.fromkeys(pairs))
    assert seen == event_zy_support(tag_task, full_event())


def test_success_event_support(tag_task):
    support = event_zy_support(tag_task, success_event())
    assert all(tag_task.success_prob(0, z, y) in (0.0, 1.0) for z, y in support)
    # success support holds every pair that can emit the success observation
    verified = [(z, y) for z, y in support if tag_task.success_prob(0, z, y) > 0]
    assert len(verified) == tag_task.n_responses


def test_predicate_event(tag_task):
    ev = EventSpec(latents=lambda z: z.ids[0] == 1)
    z_idx, _, _ = materialize_event(tag_task, ev)
    assert all(tag_task.latents[i].ids[0] == 1 for i in z_idx)


def test_explicit_event_idempotent(tag_task):
    ev = EventSpec(latents=lambda z: z.ids[0] == 1)
    explicit = explicit_event(tag_task, ev)
    assert isinstance(explicit.latents, tuple)
    assert materialize_event(tag_task, explicit) == materialize_event(tag_task, ev)


def test_empty_event_raises(tag_task):
    with pytest.raises(EmptyEventError):
        materialize_event(tag_task, EventSpec(latents=()))


def test_out_of_space_raises(tag_task):
    with pytest.raises(OutOfSpaceError):
        materialize_event(tag_task, EventSpec(latents=(99,)))
    with pytest.raises(OutOfSpaceError):
        materialize_event(tag_task, EventSpec(obs=(7,)))


def test_cap_enforced():
    with pytest.raises(CapExceededError):
        make_carry_addition_task(2, 10, cap=10_000)


def test_document_roundtrip(tag_task):
    doc = task_document(tag_task)
    again, event = task_from_document(doc)
    assert event is None
    assert again.name == tag_task.name
    assert again.truth == tag_task.truth
    assert np.array_equal(again.rho, tag_task.rho)
    for x in range(tag_task.n_prompts):
        for z in range(tag_task.n_latents):
            for y in range(tag_task.n_responses):
                for o in tag_task.obs_values:
                    assert again.evaluator(x, z, y, o) == tag_task.evaluator(x, z, y, o)


def test_seed_changes_truth():
    a = make_reward_tag_task(6, 9, seed=3)
    b = make_reward_tag_task(6, 9, seed=4)
    assert a.truth != b.truth


def test_rebuild_is_identical():
    a = make_automaton_trace_task(3, 2, seed=1)
    b = make_automaton_trace_task(3, 2, seed=1)
    assert task_document(a) == task_document(b)
