from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from sna.harness.config import MetricsConfig, NodeConfig, RunConfig
from sna.nodes import LinkConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config(nodes=(1,), duration_s=3600, link=None, window_start_s=0, **changes) -> RunConfig:
    """A short run with drift-free nodes and a lossless instant link unless overridden."""
    cfg = RunConfig(
        seed=changes.pop("seed", 1),
        duration_s=duration_s,
        nodes=tuple(n if isinstance(n, NodeConfig) else NodeConfig(n) for n in nodes),
        link=link if link is not None else LinkConfig(),
        metrics=MetricsConfig(window_start_s=window_start_s),
    )
    return replace(cfg, **changes).validate()


@pytest.fixture
def make_config():
    return small_config
