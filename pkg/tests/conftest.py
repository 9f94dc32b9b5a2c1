import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # fd-level capture hides the per-criterion lines of passing tests, so repeat them here
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n, (passed, detail) in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if passed else 'FAIL'}: {detail}")
