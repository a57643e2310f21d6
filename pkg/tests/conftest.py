import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from lofi.model import LoFiModel, ModelConfig  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=(32, 32), patch=8, d=16, heads=2, image_blocks=1, text_blocks=1, text_max_len=64,
                n_queries=4, d_dec=16, dec_blocks=2, dec_heads=2, context_cap=160, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, double=True, **kw) -> LoFiModel:
    torch.manual_seed(seed)
    m = LoFiModel(tiny_config(**kw))
    return m.double() if double else m


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def images():
    return np.random.default_rng(0).random((3, 32, 32))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
