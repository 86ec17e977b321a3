from __future__ import annotations

from dataclasses import replace

import pytest

from ccbdma.geometry import generate_topology, level_by_name
from ccbdma.physics import LorentzianModel, PhysicsContext

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def context():
    return PhysicsContext(10e9)


@pytest.fixture(scope="session")
def model():
    return LorentzianModel.default()


@pytest.fixture(scope="session")
def make_topology(context):
    cache = {}

    def make(level: str, seed: int = 0):
        key = (level, seed)
        if key not in cache:
            cache[key] = generate_topology(replace(level_by_name(level, context), rng_seed=seed), context)
        return cache[key]

    return make


@pytest.fixture
def acceptance_report():
    def report(criterion: int, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
