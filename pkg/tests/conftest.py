from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from loralab.autodiff import Tensor
from loralab.init_schemes import InitSpec, initialize
from loralab.model import ModelConfig, build_model
from loralab.runtime import tune_allocator

tune_allocator()
settings.register_profile("loralab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("loralab")


TINY = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq=192,
                   adapter_rank=2, adapter_alpha=4.0)


def randomize_adapters(model, seed: int = 0, scale: float = 0.1):
    """Give every adapter non-zero factors so gradients flow into both."""
    rng = np.random.default_rng(seed)
    for a in model.adapters.values():
        a.A = Tensor(rng.normal(0.0, scale, a.A.shape), requires_grad=True)
        a.B = Tensor(rng.normal(0.0, scale, a.B.shape), requires_grad=True)
    return model


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_base():
    return build_model(TINY, seed=3)


@pytest.fixture
def tiny_lora(tiny_base):
    return initialize(tiny_base, InitSpec("vanilla", seed=1))


# A lab small enough that whole sweeps finish in seconds.
TINY_LAB = {"model": TINY.to_dict(), "batch_size": 4, "eval_size": 4, "probe_size": 8,
            "base_steps": 4, "base_batch": 4, "base_context": 64,
            "base_mix": {"general": 40, "math": 10}}


@pytest.fixture
def tiny_lab():
    from loralab.experiments import LabConfig

    return LabConfig.from_dict(TINY_LAB)


# Filled by the acceptance suite; one line per criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
