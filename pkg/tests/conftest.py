# tests/conftest.py
import os
import tempfile

os.environ.setdefault("PAINET_DATA_DIR", tempfile.mkdtemp(prefix="painet-tests-"))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from modules.config import ModelConfig, SimConfig  # noqa: E402
from modules.decoder import ObservedGraph  # noqa: E402
from modules.metrics import probe_state  # noqa: E402
from modules.model import SystemState, init_params  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    """Untrained model whose coordinate heads are live (non-zero)."""
    cfg = ModelConfig(hidden=8, horizon=3, layers=2, num_heads=2, zero_init_heads=False, seed=7)
    return init_params(cfg, seed=7)


@pytest.fixture
def identity_params():
    """Untrained model with zero-initialized coordinate heads."""
    return init_params(ModelConfig(hidden=8, horizon=3, layers=2, seed=3), seed=3)


@pytest.fixture
def state(tiny_params):
    return probe_state(6, tiny_params, np.random.default_rng(11))


@pytest.fixture
def chain_graph():
    return ObservedGraph.undirected(4, [(0, 1), (1, 2), (2, 3)], np.tile([1.0, 1.0], (3, 1)))


@pytest.fixture
def small_sim():
    return SimConfig(n_particles=4, frames=3, stride=20, seed=5)


def make_state(n: int, graph: ObservedGraph, rng: np.random.Generator, feature_dim: int = 2,
               n_types: int = 2) -> SystemState:
    types = np.zeros((n, n_types))
    types[np.arange(n), np.arange(n) % n_types] = 1.0
    return SystemState(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
                       rng.normal(size=(n, feature_dim)), types, graph)
