import numpy as np
import pytest

from bladderstream.model import ModelConfig, init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    """Small model for gradient checks and fast training tests."""
    base = dict(segment_len=4, memory_len=2, d_model=8, num_heads=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_weights(cfg, seed=3)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
