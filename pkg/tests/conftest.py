import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from refold.data import Backbone
from refold.toybase import backbone_atoms, ca_trace

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_backbone(rng, length: int, id: str = "b") -> Backbone:
    """A chain with realistic CA spacing built from random internal angles."""
    theta = rng.uniform(np.radians(70), np.radians(150), length)
    tau = rng.uniform(-np.pi, np.pi, length)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Backbone(id, backbone_atoms(ca_trace(theta, tau)))


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance results: one line per criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
