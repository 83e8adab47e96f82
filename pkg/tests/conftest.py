import random

import pytest

from qacoop import datasets as ds


@pytest.fixture(scope="session")
def synth32():
    return ds.synth_dataset(32, 7)


@pytest.fixture(scope="session")
def vocab32(synth32):
    return ds.build_vocabulary(synth32[0])


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
