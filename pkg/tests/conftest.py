import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fcfsmatch.model import nn_model, random_model

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

NN_ALPHA = (0.5, 0.3, 0.2)
NN_BETA = (0.4, 0.4, 0.2)
UNSTABLE_ALPHA = (0.35, 0.2, 0.45)  # alpha_3 = beta_1 + 0.05


@pytest.fixture(scope="session")
def nn():
    return nn_model(NN_ALPHA, NN_BETA)


@pytest.fixture(scope="session")
def nn_unstable():
    return nn_model(UNSTABLE_ALPHA, NN_BETA)


def random_crp_models(seed, count, max_types=4):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        I = int(rng.integers(1, max_types + 1))
        J = int(rng.integers(1, max_types + 1))
        out.append(random_model(rng, I, J, edge_prob=0.5, require_crp=True))
    return out


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
