import sys

import numpy as np
import pytest

from dynperceiver.config import ImageSpec, ModelConfig, StageConfig, get_preset
from dynperceiver.model import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return get_preset("tiny")


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


def random_tiny_config(seed: int) -> ModelConfig:
    """A small random but valid architecture."""
    r = np.random.default_rng(seed)
    c1 = int(r.choice([2, 4]))
    channels = [c1]
    for _ in range(3):
        channels.append(channels[-1] * int(r.choice([1, 2])))
    size = int(r.choice([14, 16, 20]))
    strides = (1, 1, int(r.choice([1, 2])), 1)
    L0 = int(r.choice([4, 6, 8]))
    heads = [1, 1, int(r.choice([1, 2])), 1]
    stages = tuple(
        StageConfig(channels=c, conv_blocks=int(r.integers(0, 2)), sa_blocks=int(r.integers(0, 3)),
                    sa_heads=h, widening=int(r.choice([1, 2])), stride=s)
        for c, h, s in zip(channels, heads, strides)
    )
    return ModelConfig(num_classes=int(r.integers(2, 6)), stages=stages, latent_tokens=L0,
                       image=ImageSpec(int(r.choice([1, 3])), size, size), name=f"random-{seed}")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
