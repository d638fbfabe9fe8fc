import math

import numpy as np
import pytest

from ccflow.demand import MeanLevel, OUProcess
from ccflow.fptd import Boundary

T1_END = 4 * 3600.0


def table1_process() -> OUProcess:
    return OUProcess(t0=0.0, y0=0.8, kappa=1 / 3600, sigma=0.003,
                     mean_level=MeanLevel.sinusoidal(0.7, 0.3, math.pi / 7200))


def table1_boundary(p: OUProcess) -> Boundary:
    return Boundary.analytic(lambda t: p.mean(t) + 0.2 + 0.25 * t / T1_END,
                             lambda t: p.mean_deriv(t) + 0.25 / T1_END)


def tele_process() -> OUProcess:
    return OUProcess(t0=0.0, y0=1.0, kappa=3.0, sigma=0.2,
                     mean_level=MeanLevel.sinusoidal(1.0, 1.0, math.pi))


@pytest.fixture
def t1():
    p = table1_process()
    return p, table1_boundary(p)


@pytest.fixture
def tele():
    return tele_process()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def gtp_l_runs():
    """SCC- and JCC-optimal runs of the long gas scenario (about 100 s together)."""
    from ccflow.optimize import optimize
    from ccflow.scenario import load_scenario

    scn = load_scenario("gtp_l")
    jcc_prob = scn.problem()
    scc_prob = scn.problem(variant="scc")
    return {"scc": (scc_prob, optimize(scc_prob)), "jcc": (jcc_prob, optimize(jcc_prob))}


ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
