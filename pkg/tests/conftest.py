import numpy as np
import pytest

from efficientsign.data import synth_generate


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """8 classes x 10 images at 32 px on disk."""
    return synth_generate(8, 10, 32, seed=5, out_dir=tmp_path_factory.mktemp("synth8"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s[2:4])):
        terminalreporter.write_line(line)
