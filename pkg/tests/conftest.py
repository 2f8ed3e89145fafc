import numpy as np
import pytest
import torch

from icflow.backbone import FlowTransformer, ModelConfig, randomize_
from icflow.positions import assign_positions, positions_tensor


@pytest.fixture
def tiny_cfg():
    return ModelConfig(latent_channels=12, model_dim=32, num_heads=2, depth_double=1, depth_single=2, instruction_vocab=10)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return randomize_(FlowTransformer(tiny_cfg), std=0.2, generator=torch.Generator().manual_seed(1))


@pytest.fixture
def tiny_inputs(tiny_cfg):
    g = torch.Generator().manual_seed(3)
    target, context = (2, 2), (2, 3)
    pos = positions_tensor(assign_positions(target, [context]))
    tokens = torch.randn(2, len(pos), tiny_cfg.latent_channels, generator=g)
    text = torch.randint(0, tiny_cfg.instruction_vocab, (2, 3), generator=g)
    t = torch.tensor([0.3, 0.8])
    return tokens, text, pos, t, 4


# acceptance criteria report one line each in the terminal summary

def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """Record ``(ok, detail)`` for an acceptance criterion and assert it."""
    def record(number: int, name: str, ok: bool, detail: str):
        request.config._acceptance_lines[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {name}: {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
