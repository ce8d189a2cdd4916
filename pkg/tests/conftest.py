import sys
import numpy as np
import pytest

from modret.encoder import Backbone, EncoderConfig, PromptStack
from modret.numcore import Rng

TINY = EncoderConfig(layers=2, dim=16, heads=2, ffn_dim=32, vocab_size=64, max_len=16, prompt_len=4, seed=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_backbone():
    return Backbone.init(TINY)


@pytest.fixture
def rng():
    return Rng(12345)


def random_stack(cfg, seed, std=0.5):
    return PromptStack(Rng(seed).normal(cfg.prompt_shape, std))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
