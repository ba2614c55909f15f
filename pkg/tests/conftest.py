import numpy as np
import pytest

from entropylab.env import micro_spec
from entropylab.policy import PolicyArchitecture, init_snapshot

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def spec():
    return micro_spec()


@pytest.fixture(scope="session")
def arch(spec):
    return PolicyArchitecture(vocab_size=spec.vocab_size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_snapshot(arch, seed, scale=0.3):
    return init_snapshot(arch, seed, scale, scale)
