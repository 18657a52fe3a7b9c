import numpy as np
import pytest

from latentlab.models import random_model, uniform_model
from latentlab.rng import stream
from latentlab.tasks import make_reward_tag_task

np.set_printoptions(precision=12, suppress=False)


@pytest.fixture(scope="session")
def tag_task():
    """Small shared task: 3 prompts, 2 tags x 5 responses."""
    return make_reward_tag_task(3, 5, seed=2)


@pytest.fixture(scope="session")
def tag_model(tag_task):
    return random_model(tag_task, stream(99, "fixture"), scale=0.8)


@pytest.fixture(scope="session")
def tag_uniform(tag_task):
    return uniform_model(tag_task)
