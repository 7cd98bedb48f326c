import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four small phantoms: 2 train, 1 val, 1 test, one LT fraction."""
    from petbench import phantom as P

    specs = [P.random_phantom_spec(shape=(6, 32, 32), rng=i, kappa=2.0) for i in range(4)]
    return P.make_paired_dataset(specs, fractions=(1 / 3,), splits=(2, 1, 1), seed=5)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record and print a PASS/FAIL line for one acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
