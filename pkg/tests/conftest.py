import numpy as np
import pytest

from jointdiff.model import ModelConfig, TransformerModel, build_mask
from jointdiff.toyworld import Dataset, WorldConfig, generate_records


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def layout(world):
    return world.layout()


@pytest.fixture(scope="session")
def seq(world):
    return world.sequence_layout()


@pytest.fixture(scope="session")
def episodes(world, layout):
    return Dataset(world, layout, "episodes", generate_records(world, 64, seed=902))


@pytest.fixture(scope="session")
def tiny_model(layout, seq):
    """Small untrained model shared by structural tests."""
    cfg = ModelConfig(layers=2, heads=2, width=32, init_seed=7)
    return TransformerModel(cfg, layout.total, seq.context_len)


@pytest.fixture(scope="session")
def hybrid_mask(seq):
    return build_mask("hybrid", seq)


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise")
