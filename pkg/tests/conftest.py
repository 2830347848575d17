import pytest
import torch

from thermovi.systems import Piston, RigidBody

torch.set_num_threads(1)

ACCEPTANCE = []


def record(number, name, ok, detail=""):
    """Log one acceptance line; the summary prints them after the run."""
    line = f"criterion {number:>3} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def piston():
    return Piston()


@pytest.fixture(scope="session")
def rigid():
    return RigidBody()
