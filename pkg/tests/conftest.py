import sys

import numpy as np
import pytest

from matrn.config import desk_config
from matrn.tensor import clear_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    clear_tape()
    yield
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_config(**overrides):
    """A tiny model (D=8, T=4, 8x16 input) for fast structural and gradient tests."""
    base = dict(d_model=8, max_len=4, heads=2, blocks=1, lm_blocks=1, ffn=16, img_h=8, img_w=16,
                stem_width=4, backbone_widths=(4, 8, 8, 8), unet_channels=4, batch_size=2,
                iterations=2)
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
