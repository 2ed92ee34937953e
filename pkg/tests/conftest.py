import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    max_examples=100,
    suppress_health_check=[HealthCheck.too_slow],
    deadline=None,
)
settings.load_profile("default")


@pytest.fixture
def store_dir(tmp_path):
    d = tmp_path / "store"
    d.mkdir()
    return str(d)


@pytest.fixture
def small_config():
    # 64 KiB regions keep unit tests quick and make eviction reachable.
    from triekv.config import StoreConfig

    return StoreConfig(branching=64, sluggishness=4, region_bits=16, memory_budget=16)
