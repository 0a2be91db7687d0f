import os
import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

BACKEND = Path(__file__).resolve().parent.parent / 'backend'
sys.path.insert(0, str(BACKEND))

from engine.floorplan import load_floorplan_file  # noqa: E402
from services.clock import VirtualClock  # noqa: E402
from services.gateway_service import GatewayService, load_node_fixture  # noqa: E402
from services.store_service import StoreService  # noqa: E402
from simulation.scenario import load_scenario_file  # noqa: E402

np.seterr(all="warn")

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None, derandomize=True)
hypothesis.settings.register_profile("dev", max_examples=20, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

FIXTURES = BACKEND / 'fixtures'


@pytest.fixture(scope='session')
def demo_plan():
    return load_floorplan_file(FIXTURES / 'demo_plan.json')


@pytest.fixture(scope='session')
def demo_scenario():
    return load_scenario_file(FIXTURES / 'demo_scenario.json')


@pytest.fixture(scope='session')
def demo_nodes():
    return load_node_fixture((FIXTURES / 'demo_nodes.json').read_text(encoding='utf-8'))


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def gateway(demo_plan, demo_nodes, clock):
    gw = GatewayService(StoreService(), clock, demo_plan)
    gw.load_nodes(demo_nodes)
    yield gw
    gw.close()
