import os
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("NULLSPACE_RECON_CACHE",
                      str(Path(__file__).resolve().parent.parent / ".pytest_cache" / "operators"))

from nullspace_recon.operators import (  # noqa: E402
    DenseMatrixOp, LimitedAngleRadonOp, MaskedFourierOp)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def radon8():
    return LimitedAngleRadonOp.limited(8, 6).compute_svd()


@pytest.fixture(scope="session")
def radon16():
    return LimitedAngleRadonOp.limited(16, 12).compute_svd()


@pytest.fixture(scope="session")
def radon64():
    return LimitedAngleRadonOp.limited(64, 30).compute_svd()


@pytest.fixture(scope="session")
def fourier16():
    return MaskedFourierOp.from_fraction(16, 0.25, 0.08, seed=0)


@pytest.fixture(scope="session")
def fourier8():
    return MaskedFourierOp.from_fraction(8, 0.5, 0.25, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dense64():
    return DenseMatrixOp(np.random.default_rng(5).standard_normal((6, 4)))


@pytest.fixture(scope="session")
def record_criterion():
    """Append one PASS/FAIL line per acceptance criterion to the terminal summary."""
    def record(label, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
