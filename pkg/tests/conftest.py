from __future__ import annotations

import numpy as np
import pytest

from segkit.taxonomy import default_registry
from segkit.volio import LabelMap, Volume3D


def iso_affine(spacing=1.5, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    s = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    a = np.diag([*s, 1.0])
    a[:3, 3] = origin
    return a


def labelmap(data, spacing=1.5) -> LabelMap:
    return LabelMap(np.asarray(data), iso_affine(spacing))


def volume(data, spacing=1.5) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=float), iso_affine(spacing))


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
