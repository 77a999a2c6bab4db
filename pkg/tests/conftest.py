import numpy as np
import pytest

from cc_env import Scenario
from dsr_engine import RegressionDataset
from expr_core import evaluate_batch, parse_infix


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def small_scenario():
    """500 Mbps, single pair, 50 ms at 1 ms windows."""
    return Scenario(bottleneck_capacity_mbps=500.0, pair_count=1, duration_s=0.05)


def planted_dataset(expression, rows=1000, seed=0, units="ms"):
    """Noise-free regression data whose labels are `expression` on random observations."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([
        rng.uniform(0.02, 2.0, rows),
        rng.uniform(0.05, 2.0, rows),
        rng.uniform(1.0, 4.0, rows),
        rng.uniform(0.0, 0.2, rows),
    ])
    y, _ = evaluate_batch(parse_infix(expression), X)
    return RegressionDataset(X, y, units)


@pytest.fixture
def planted():
    return planted_dataset


@pytest.fixture
def cos_x2_dataset():
    return planted_dataset("cos(x2)")
