import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "offset-market"))

from config import AgentClassSpec, MarketConfig, NetConfig  # noqa: E402
from market_env import AgentTable  # noqa: E402


@pytest.fixture
def market():
    """Two one-year compliance periods with 24 steps each, penalty 50."""
    return MarketConfig()


@pytest.fixture
def four_classes():
    return [
        AgentClassSpec("One", requirement=25.0, gen_size=2.0, gen_cost=100.0),
        AgentClassSpec("Two", requirement=25.0, gen_size=1.5, gen_cost=75.0),
        AgentClassSpec("Three", requirement=25.0, gen_size=1.0, gen_cost=50.0),
        AgentClassSpec("Four", requirement=25.0, gen_size=0.5, gen_cost=25.0),
    ]


@pytest.fixture
def four_agents(four_classes):
    return AgentTable.from_classes(four_classes)


@pytest.fixture
def small_net():
    return NetConfig(hidden_layers=2, nodes_per_layer=16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
