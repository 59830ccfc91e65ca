import numpy as np
import pytest

from slate_ope import Context, Dataset, generate_world


def make_dataset(rewards, propensities=None, n_candidates=None, actions=None):
    """Dataset with arbitrary rewards; actions default to the first K candidates in order."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    n, k = rewards.shape
    m = n_candidates or k
    ctx = Context("ctx", tuple(f"c{j}" for j in range(m)))
    if actions is None:
        actions = np.tile(np.arange(k), (n, 1))
    if propensities is None:
        propensities = np.full((n, k), 0.5)
    return Dataset([ctx], np.zeros(n, dtype=int), actions, propensities, rewards)


@pytest.fixture(scope="session")
def world():
    return generate_world(n_contexts=20, n_candidates=10, seed=7)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(n_contexts=4, n_candidates=4, seed=11)
