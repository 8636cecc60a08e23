import functools

import numpy as np
import pytest

from umask.config import ModelConfig
from umask.training import init_params

SMALL = ModelConfig(dims=(2, 8, 4, 4), patch=(4, 2, 2), model_dim=16, heads=2, blocks=2,
                    d=8, d_task=8, enc_hidden=16, profile_dim=8, diffusion_steps=6)

# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_store():
    return init_params(SMALL, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@functools.lru_cache(maxsize=None)
def desk_population():
    from umask.evaluation import build_population
    return build_population(0, 128, 32, ModelConfig())


@functools.lru_cache(maxsize=None)
def trained_seed(seed: int):
    """Default-size model after 30 epochs on the 128-user synthetic set (about 80 s per seed)."""
    from umask.cli import train_model
    from umask.config import RunConfig
    _, store, history = train_model(RunConfig(), seed)
    return store, history


@pytest.fixture(scope="session")
def trained():
    store, history = trained_seed(0)
    return ModelConfig(), desk_population(), store, history


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
