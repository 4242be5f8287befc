"""Shared fixtures: small synthetic sessions reused across test modules."""

import numpy as np
import pytest

from tbfm.sessiondata import split_train_test
from tbfm.synthgen import SynthConfig, generate_session


@pytest.fixture(scope="session")
def small_session():
    """10-channel session with the default planted state dependence."""
    cfg = SynthConfig(n_channels=10, n_trials=2200, n_resting=400, seed=101)
    session, truth = generate_session(cfg)
    return session, truth


@pytest.fixture(scope="session")
def small_split(small_session):
    session, _ = small_session
    return split_train_test(session.stim, 1700, 500)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
