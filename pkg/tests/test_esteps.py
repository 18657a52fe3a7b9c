import numpy as np
import pytest

from latentlab.errors import ConfigError
from latentlab.esteps import (
    BACKENDS,
    EStepSpec,
    PolicyGradConfig,
    estep_exact,
    estep_planning,
    estep_policy_gradient,
    estep_rejection,
    run_estep,
    tv_to_exact,
)
from latentlab.graph import JointModel
from latentlab.models import uniform_model
from latentlab.rng import stream
from latentlab.tasks import make_reward_tag_task, success_event


@pytest.fixture(scope="module")
def jm(tag_model):
    return JointModel(tag_model)


def test_exact_has_zero_tv(jm, tag_task):
    for x in range(tag_task.n_prompts):
        res = estep_exact(jm, x, success_event())
        assert res.backend == "exact"
        assert res.tv_error == 0.0
        assert res.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_planning_matches_exact(jm, tag_task):
    for x in range(tag_task.n_prompts):
        res = estep_planning(jm, x, success_event())
        assert res.tv_error is not None and res.tv_error < 1e-9


def test_rejection_converges(jm):
    res = estep_rejection(jm, 0, success_event(), budget=6000, rng=stream(8, "rej"))
    assert res.tv_error is not None and res.tv_error < 0.05
    assert 0 < res.acceptance_rate <= 1.0
    assert res.samples_used == 6000


def test_rejection_zero_budget_rejected(jm):
    with pytest.raises(ConfigError):
        estep_rejection(jm, 0, success_event(), budget=0, rng=stream(0, "z"))


def test_rejection_zero_acceptance(jm):
    # one draw at budget 1 essentially never lands in the event for this model
    rng = stream(13, "tiny")
    hits = 0
    for _ in range(40):
        res = estep_rejection(jm, 0, success_event(), budget=1, rng=rng)
        if res.empty:
            hits += 1
            assert res.support == [] and len(res.probs) == 0
    assert hits > 0


def test_soft_rejection_is_importance_weighted():
    soft = make_reward_tag_task(3, 5, seed=2, evaluator="soft")
    jms = JointModel(uniform_model(soft))
    res = estep_rejection(jms, 0, success_event(), budget=500, rng=stream(1, "iw"))
    assert "importance_weighted" in res.flags


def test_policy_gradient_exact_mode(jm):
    cfg = PolicyGradConfig(iterations=60, batch_size=0, step_size=0.5)
    res = estep_policy_gradient(jm, 0, success_event(), cfg, rng=stream(0, "pg"))
    assert res.tv_error is not None and res.tv_error < 1e-3


def test_tv_helper_agrees_with_direct(jm, tag_task):
    res = estep_planning(jm, 1, success_event())
    tv = tv_to_exact(jm, 1, success_event(), res.support, res.probs)
    assert tv == pytest.approx(res.tv_error, abs=1e-12)


def test_run_estep_dispatch(jm):
    for backend in BACKENDS:
        params = {}
        if backend == "rejection":
            params = {"budget": 300}
        if backend == "policy_gradient":
            params = {"iterations": 5, "batch_size": 0}
        res = run_estep(
            jm, 0, success_event(), EStepSpec(backend, params), rng=stream(3, "d")
        )
        assert res.backend == backend
        assert res.wall_time_s >= 0.0


def test_run_estep_unknown_backend(jm):
    with pytest.raises(ConfigError):
        run_estep(jm, 0, success_event(), EStepSpec("oracle", {}))


def test_rejection_needs_rng(jm):
    with pytest.raises(ConfigError):
        run_estep(jm, 0, success_event(), EStepSpec("rejection", {"budget": 10}))
