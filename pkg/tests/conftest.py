import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tribogen.dataset import GenerationConfig, prepare_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """320 samples in 5 shards, split and scaled."""
    cfg = GenerationConfig(recipe_count=20, shard_size=64, base_seed=7)
    manifest, _ = prepare_dataset(cfg, tmp_path_factory.mktemp("small"))
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
