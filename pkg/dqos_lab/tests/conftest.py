# conftest.py to ensure project root is on sys.path for imports
import os
import sys

# Add project root to path for pytest
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dqos_lab.simcore import Engine, SimConfig  # noqa: E402
from dqos_lab.telemetry import Dataset, Snapshot, StateLayout, StateVector  # noqa: E402
from dqos_lab.topology import default_topology, same_site_topology  # noqa: E402


@pytest.fixture
def line_topology():
    """host1 - switch1 - switch2 - switch3 - server1, 10 ms end to end."""
    return same_site_topology()


@pytest.fixture
def fabric():
    return default_topology()


@pytest.fixture
def line_engine(line_topology):
    return Engine(line_topology, SimConfig(seed=7))


@pytest.fixture
def tiny_layout():
    return StateLayout(
        (
            ("host1-server1",),
            ("s1", "s2"),
            ("s1", "s2"),
            ("s1-s2",),
            ("s1", "s2"),
        )
    )


def make_linear_dataset(layout, n=60, k=2, seed=0, noise=0.0):
    """
    Snapshots whose changed drop rates are a known affine map of the attack
    vector and the current drop rates.
    """
    rng = np.random.default_rng(seed)
    n_sw = layout.n_switches
    weights = rng.normal(0.0, 1.0, size=(n_sw, k + n_sw))
    snapshots = []
    for i in range(n):
        current = StateVector.from_array(layout, rng.uniform(0.0, 5.0, size=layout.width))
        alphas = tuple(float(a) for a in rng.uniform(0.0, 1.0, size=k))
        inputs = np.concatenate([alphas, current.cat2_drop_rates])
        drops = weights @ inputs + 5.0 + rng.normal(0.0, noise, size=n_sw)
        changed_values = current.as_array().copy()
        changed_values[layout.category_slice(2)] = drops
        changed = StateVector.from_array(layout, changed_values)
        snapshots.append(Snapshot(float(i * 10_000), current, alphas, changed))
    return Dataset(layout, k, snapshots, "fingerprint")


@pytest.fixture
def linear_dataset(tiny_layout):
    return make_linear_dataset(tiny_layout)
