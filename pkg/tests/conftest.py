from __future__ import annotations

import numpy as np
import pytest

from getad.road_graph import RoadNetwork, SegmentRecord
from getad.synth_world import GridSpec, grid_network


def path_network(n: int = 4) -> RoadNetwork:
    """One-way chain of n segments: 0 -> 1 -> ... -> n-1."""
    segments = [
        SegmentRecord(segment_id=i, tail_node=i, head_node=i + 1, length_m=100.0 + i,
                      road_class=i % 2, lanes=1 + i % 2, maxspeed_kmh=50.0)
        for i in range(n)
    ]
    return RoadNetwork(segments, class_names=["residential", "primary"])


@pytest.fixture
def chain4() -> RoadNetwork:
    return path_network(4)


@pytest.fixture(scope="session")
def grid3() -> RoadNetwork:
    return grid_network(GridSpec(width=3, height=3, n_agents=1, trips_per_agent=0))


@pytest.fixture(scope="session")
def grid5() -> RoadNetwork:
    return grid_network(GridSpec(width=5, height=5, n_agents=1, trips_per_agent=0))


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
