import numpy as np
import pytest

from traffic_incentives.agents import Game, make_agent
from traffic_incentives.network import make_network


@pytest.fixture
def three_node_game():
    """Ring-like 3-node network with one PEV and two FV classes."""
    net = make_network([(1, 2, 0.2, 0.01, 5), (2, 1, 0.2, 0.01, 5), (2, 3, 0.1, 0.02, 0), (3, 2, 0.1, 0.02, 0),
                        (1, 3, 0.3, 0.01, 0), (3, 1, 0.3, 0.01, 0)], charge_nodes=[3], park_nodes=[2, 3])
    agents = [make_agent(net, 0, "pev", 10, 1, 2, 2.0, energy_demand=5, min_charge=0.2),
              make_agent(net, 1, "fv", 20, 1, 2, 1.5),
              make_agent(net, 2, "fv", 15, 3, 2, 1.0)]
    return Game(net, agents, [0.35], [5.0, 6.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
