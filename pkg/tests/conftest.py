from __future__ import annotations

import functools

import pytest

from secureplan.io import load_scenario, packaged_scenario
from secureplan.planner import plan, plan_baseline
from secureplan.simulator import run

# acceptance lines, printed once at the end of the session
ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def scenario(name: str):
    return load_scenario(packaged_scenario(name))


@functools.lru_cache(maxsize=None)
def initial_plan(name: str, secure: bool):
    sc = scenario(name)
    solver = plan if secure else plan_baseline
    return solver(sc.problem(sc.initial_belief(), sc.start), sp=sc.solver)


@functools.lru_cache(maxsize=None)
def closed_loop(name: str, secure: bool, seed: int = 7):
    return run(scenario(name), secure=secure, seed=seed)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
