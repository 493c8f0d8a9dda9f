from __future__ import annotations

import sys

import numpy as np
import pytest

from tpolab.core import BanditInstance, PolicyTable, RewardTable


def make_worked() -> BanditInstance:
    """One state, two actions, uniform reference, beta = R = 1, r* = (1, 0)."""
    return BanditInstance(np.array([1.0]), PolicyTable([[0.5, 0.5]]), 1.0, 1.0, RewardTable([[1.0, 0.0]]))


def random_instance(rng: np.random.Generator, S: int = 3, A: int = 4, beta: float | None = None,
                    r_max: float = 1.0) -> BanditInstance:
    beta = float(rng.choice([0.1, 0.5, 1.0])) if beta is None else beta
    return BanditInstance(rng.dirichlet(np.ones(S)), PolicyTable(rng.dirichlet(np.full(A, 2.0), size=S)), beta, r_max,
                          RewardTable(rng.uniform(0, r_max, size=(S, A))))


@pytest.fixture
def worked() -> BanditInstance:
    return make_worked()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
