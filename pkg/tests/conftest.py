import sys

import numpy as np
import pytest

from tint.dataio import SynthSpec, synth_generate
from tint.model import ModelConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 single-channel synthetic frames (32/4/4 split)."""
    root = tmp_path_factory.mktemp("synth40")
    return synth_generate(SynthSpec(count=40, seed=3, size=41), root)


@pytest.fixture(scope="session")
def two_channel_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_ir_pmw")
    return synth_generate(SynthSpec(count=20, seed=5, size=33, modalities=("IR", "PMW")), root)


@pytest.fixture
def test_config():
    return ModelConfig.test()


@pytest.fixture
def tiny_model():
    return build(ModelConfig.test())


@pytest.fixture
def tiny_model64():
    return build(ModelConfig.test(), dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "REPORT_LINES", [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
