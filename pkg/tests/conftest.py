import numpy as np
import pytest

from sparsefeed.config import parse_config

QUAD_CFG = """\
method = s_sgd_ef
P = 4
eta = 0.05
T = 40
k = 3
seed = 5
log_every = 10
x0_scale = 1.0

[problem]
kind = quadratic
d = 12
L = 2.0
mu = 0.1
n = 6
"""


@pytest.fixture
def quad_cfg_text():
    return QUAD_CFG


@pytest.fixture
def quad_cfg():
    return parse_config(QUAD_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    ran = set()
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rpartition("::")[2]
            if name.startswith("test_criterion_"):
                ran.add(int(name.split("_")[2]))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in VERDICTS:
            line = VERDICTS[n]
        elif n in ran:
            line = f"FAIL criterion {n}: did not run to completion (see errors above)"
        else:
            line = f"NOT RUN criterion {n}: deselected"
        terminalreporter.write_line(line)
