import numpy as np
import pytest

from latentlab.errors import RecordFormatError
from latentlab.models import (
    LogitModel,
    NgramFeatures,
    TabularFeatures,
    random_model,
    read_checkpoint,
    uniform_model,
    write_checkpoint,
)
from latentlab.rng import stream
from latentlab.tasks import make_reward_tag_task


def test_uniform_joint_is_flat(tag_task, tag_uniform):
    probs = tag_uniform.joint_probs(0)
    assert np.allclose(probs, 1.0 / tag_task.n_joint, atol=1e-15)


def test_joint_probs_normalize(tag_model, tag_task):
    for x in range(tag_task.n_prompts):
        assert tag_model.joint_probs(x).sum() == pytest.approx(1.0, abs=1e-12)


def test_joint_logprob_matches_table(tag_model, tag_task):
    table = tag_model.joint_log_probs(1)
    for j in range(0, tag_task.n_joint, 3):
        z, y = tag_task.zy_unindex(j)
        assert tag_model.joint_logprob(1, z, y) == pytest.approx(table[j], abs=1e-12)


def test_conditional_tables_factorize(tag_model, tag_task):
    # chain-rule product of token conditionals rebuilds every joint logprob
    view = tag_model.conditional_tables(2)
    table = tag_model.joint_log_probs(2)
    for j in range(tag_task.n_joint):
        seq = tag_task.joint_sequences[j]
        assert view.seq_logprob(seq) == pytest.approx(table[j], abs=1e-10)


def test_with_theta_is_functional(tag_model):
    theta2 = tag_model.theta + 1.0
    other = tag_model.with_theta(theta2)
    assert other is not tag_model
    assert np.array_equal(tag_model.theta + 1.0, other.theta)


def test_sample_joint_reproducible(tag_model):
    a = tag_model.sample_joint(0, stream(7, "s"))
    b = tag_model.sample_joint(0, stream(7, "s"))
    assert a == b


def test_sample_joint_frequencies(tag_task, tag_model):
    rng = stream(11, "freq")
    counts = np.zeros(tag_task.n_joint)
    n = 4000
    for _ in range(n):
        z, y = tag_model.sample_joint(0, rng)
        counts[tag_task.zy_index(z, y)] += 1
    assert np.abs(counts / n - tag_model.joint_probs(0)).max() < 0.05


def test_greedy_joint_is_argmax_path(tag_task, tag_model):
    z, y = tag_model.greedy_joint(0)
    assert tag_model.joint_logprob(0, z, y) > -np.inf


def test_ngram_features_shape(tag_task):
    feats = NgramFeatures(tag_task, n=2)
    model = uniform_model(tag_task, features=feats)
    assert model.theta.shape == (feats.dim,)
    assert model.joint_probs(0).sum() == pytest.approx(1.0, abs=1e-12)


def test_tabular_dim(tag_task):
    feats = TabularFeatures(tag_task)
    assert feats.dim > 0
    model = random_model(tag_task, stream(0, "m"), scale=0.3, features=feats)
    assert model.theta.shape == (feats.dim,)


def test_checkpoint_roundtrip(tmp_path, tag_model):
    p = tmp_path / "model.txt"
    with open(p, "w") as fh:
        write_checkpoint(tag_model, fh)
    with open(p) as fh:
        again = read_checkpoint(tag_model.task, fh)
    assert np.array_equal(again.theta, tag_model.theta)
    assert np.allclose(again.joint_log_probs(0), tag_model.joint_log_probs(0))


def test_checkpoint_wrong_task(tmp_path, tag_model):
    p = tmp_path / "model.txt"
    with open(p, "w") as fh:
        write_checkpoint(tag_model, fh)
    other = make_reward_tag_task(4, 5, seed=9)
    with open(p) as fh:
        with pytest.raises(RecordFormatError):
            read_checkpoint(other, fh)


def test_checkpoint_garbage(tmp_path, tag_task):
    p = tmp_path / "model.txt"
    p.write_text("not a checkpoint\n")
    with open(p) as fh:
        with pytest.raises(RecordFormatError):
            read_checkpoint(tag_task, fh)


def test_log_partition_consistent(tag_model, tag_task):
    # joint_probs must equal exp(logits - log_partition) summed over paths
    for x in range(tag_task.n_prompts):
        lp = tag_model.joint_log_probs(x)
        assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)
