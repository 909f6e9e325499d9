import sys

import numpy as np
import pytest

from squat.gradcheck import random_scene, small_config
from squat.model import SquatModel


@pytest.fixture
def tiny_model():
    return SquatModel(small_config(), seed=3)


@pytest.fixture
def tiny_scene():
    return random_scene(4, 6, 5, seed=11)


def perm_scene(dets, perm):
    """Detections reordered so new position k holds old detection perm[k]."""
    return [dets[p] for p in perm]


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
