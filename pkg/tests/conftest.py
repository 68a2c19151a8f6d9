import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    from ifssnet.net import NetConfig

    return NetConfig(w=3, in_hw=32, channels=(2, 2, 2, 2, 4), atrous_rates=(1, 2))


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    """Keep one pass/fail line per acceptance criterion for the summary."""
    line = f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
