import numpy as np
import pytest

from conformer_nas.autograd import reset_tape
from conformer_nas.core.dependencies import reset_services
from conformer_nas.schemas.config import (
    DssConfig,
    NoamConfig,
    RandomSearchConfig,
    RunConfig,
    SearchConfig,
    SearchSpaceConfig,
    SyntheticTaskSpec,
    TrainingConfig,
)
from conformer_nas.services.data import generate_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale search experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_space():
    """One block, every candidate, d_model 16 so sixteen heads still divide it."""
    return SearchSpaceConfig(num_blocks=1, d_model=16, feature_dim=4, vocab_size=4, dropout_rate=0.0)


@pytest.fixture
def tiny_config(tiny_space):
    return RunConfig(
        space=tiny_space,
        noam=NoamConfig(d_model=16, warmup_steps=4),
        dss=DssConfig(warmup_steps=4),
        task=SyntheticTaskSpec(
            feature_dim=4, vocab_size=4, min_length=12, max_length=16, context_width=3,
            label_rate=0.2, noise_level=0.1, train_size=8, valid_size=4, test_size=4, seed=3,
        ),
        search=SearchConfig(epochs=2, batch_size=4),
        retrain=TrainingConfig(epochs=2, batch_size=4),
        random_search=RandomSearchConfig(trials=2, budget_epochs=1),
    )


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate_dataset(tiny_config.task)


@pytest.fixture(autouse=True)
def fresh_services():
    yield
    reset_services()
