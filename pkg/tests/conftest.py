import contextlib
import sys

import numpy as np
import pytest
import torch

from avseld.backbone import BackboneConfig


def tiny_config(in_channels=7, **kw) -> BackboneConfig:
    """Smallest network that still has every layer of the full one."""
    base = dict(in_channels=in_channels, resblock_channels=(8, 16, 32, 64), embed_dim=32,
                conformer_layers=2, attn_heads=4, conv_kernel=7, head_hidden=32,
                conformer_dropout=0.0, dropout=0.0)
    base.update(kw)
    return BackboneConfig(**base)


@contextlib.contextmanager
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(acceptance, "CRITERIA_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
