from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("rankae", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rankae")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_net(we, wd, be=None, bd=None):
    """Single-layer identity-activation encoder and decoder with given weights."""
    from rankae.net import AutoencoderNet, LayerSpec

    we = np.asarray(we, dtype=np.float64)
    wd = np.asarray(wd, dtype=np.float64)
    d, n = we.shape
    be = np.zeros(d) if be is None else be
    bd = np.zeros(n) if bd is None else bd
    theta = np.concatenate([we.ravel(), be, wd.ravel(), bd])
    return AutoencoderNet((LayerSpec(n, d, "identity"),), (LayerSpec(d, n, "identity"),), theta)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome and assert it."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
